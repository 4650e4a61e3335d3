//! Versioned JSON network documents.
//!
//! ```json
//! {"version":1,"dims":[2,3,1],"layers":[{"w":[[..],..],"b":[..],"act":"tanh"},..],"normalize_output":false}
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a save/load cycle reproduces every weight bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::mlp::{Activation, Layer, Mlp};
use crate::error::{Error, Result};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub version: u32,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerDoc>,
    pub normalize_output: bool,
}

impl From<&Mlp> for NetworkDoc {
    fn from(net: &Mlp) -> Self {
        NetworkDoc {
            version: NETWORK_FORMAT_VERSION,
            dims: net.dims(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerDoc {
                    w: l.weights().to_rows(),
                    b: l.bias().to_vec(),
                    act: l.activation(),
                })
                .collect(),
            normalize_output: net.normalize_output(),
        }
    }
}

impl TryFrom<NetworkDoc> for Mlp {
    type Error = Error;

    fn try_from(doc: NetworkDoc) -> Result<Self> {
        if doc.version != NETWORK_FORMAT_VERSION {
            return Err(Error::Version {
                expected: NETWORK_FORMAT_VERSION,
                found: doc.version,
            });
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let w = if l.w.is_empty() {
                    Matrix::zeros(0, 0)
                } else {
                    Matrix::from_rows(&l.w)?
                };
                Layer::new(w, l.b, l.act)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp::new(layers, doc.normalize_output)?;
        if net.dims() != doc.dims {
            return Err(Error::InvalidNetwork(format!(
                "declared dims {:?} disagree with layer shapes {:?}",
                doc.dims,
                net.dims()
            )));
        }
        Ok(net)
    }
}

impl Mlp {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        Mlp::try_from(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
