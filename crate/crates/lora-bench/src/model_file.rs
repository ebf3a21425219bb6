//! JSON model files with canonical parameter names.

use std::collections::BTreeMap;
use std::path::Path;

use lora_construct::fnn::FnnModel;
use lora_construct::linear::LinearChain;
use lora_construct::matrix::MatrixJson;
use lora_construct::tfn::{AttentionHead, HeadType, TfnBlock, TfnModel};
use lora_construct::train::Model;
use lora_construct::{Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: String,
    pub dim: usize,
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_type: Option<HeadType>,
    pub weights: BTreeMap<String, MatrixJson>,
    #[serde(default)]
    pub biases: BTreeMap<String, Vec<f64>>,
}

fn bad(msg: impl Into<String>) -> BenchError {
    BenchError::Model(msg.into())
}

impl ModelFile {
    pub fn from_model(model: &Model) -> Self {
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        let mut put_w = |k: String, m: &Matrix| {
            weights.insert(k, MatrixJson::from(m));
        };
        let (depth, heads, head_type) = match model {
            Model::Linear(c) => {
                for (i, w) in c.weights().iter().enumerate() {
                    put_w(format!("W_{}", i + 1), w);
                }
                (c.depth(), None, None)
            }
            Model::Fnn(m) => {
                for (i, (w, b)) in m.weights.iter().zip(&m.biases).enumerate() {
                    put_w(format!("W_{}", i + 1), w);
                    biases.insert(format!("b_{}", i + 1), b.as_slice().to_vec());
                }
                (m.depth(), None, None)
            }
            Model::Tfn(m) => {
                for (l, blk) in m.blocks.iter().enumerate() {
                    let l = l + 1;
                    for (h, head) in blk.heads.iter().enumerate() {
                        let h = h + 1;
                        put_w(format!("W_Q_{l}_{h}"), &head.w_q);
                        put_w(format!("W_K_{l}_{h}"), &head.w_k);
                        put_w(format!("W_V_{l}_{h}"), &head.w_v);
                        if let Some(o) = &head.w_o {
                            put_w(format!("W_O_{l}_{h}"), o);
                        }
                    }
                    put_w(format!("W_1_{l}"), &blk.w1);
                    put_w(format!("W_2_{l}"), &blk.w2);
                    biases.insert(format!("b_1_{l}"), blk.b1.as_slice().to_vec());
                    biases.insert(format!("b_2_{l}"), blk.b2.as_slice().to_vec());
                }
                put_w("W_o".into(), &m.w_out);
                (m.depth(), Some(m.heads()), Some(m.head_type))
            }
        };
        ModelFile {
            kind: model.kind().to_string(),
            dim: model.dim(),
            depth,
            heads,
            head_type,
            weights,
            biases,
        }
    }

    pub fn into_model(mut self) -> Result<Model, BenchError> {
        let mut take_w = |k: &str| -> Result<Matrix, BenchError> {
            let j = self.weights.remove(k).ok_or_else(|| bad(format!("missing weight `{k}`")))?;
            Matrix::try_from(j).map_err(|e| bad(format!("{k}: {e}")))
        };
        let mut take_b = |k: &str| -> Result<Vector, BenchError> {
            let v = self.biases.remove(k).ok_or_else(|| bad(format!("missing bias `{k}`")))?;
            Ok(Vector::from_vec(v))
        };
        let model = match self.kind.as_str() {
            "linear" => {
                let ws = (1..=self.depth).map(|i| take_w(&format!("W_{i}"))).collect::<Result<Vec<_>, _>>()?;
                Model::Linear(LinearChain::new(ws).map_err(|e| bad(e.to_string()))?)
            }
            "fnn" => {
                let ws = (1..=self.depth).map(|i| take_w(&format!("W_{i}"))).collect::<Result<Vec<_>, _>>()?;
                let bs = (1..=self.depth).map(|i| take_b(&format!("b_{i}"))).collect::<Result<Vec<_>, _>>()?;
                Model::Fnn(FnnModel::new(ws, bs).map_err(|e| bad(e.to_string()))?)
            }
            "tfn" => {
                let heads = self.heads.ok_or_else(|| bad("tfn model needs `heads`"))?;
                let head_type = self.head_type.ok_or_else(|| bad("tfn model needs `head_type`"))?;
                let mut blocks = Vec::with_capacity(self.depth);
                for l in 1..=self.depth {
                    let mut hs = Vec::with_capacity(heads);
                    for h in 1..=heads {
                        hs.push(AttentionHead {
                            w_q: take_w(&format!("W_Q_{l}_{h}"))?,
                            w_k: take_w(&format!("W_K_{l}_{h}"))?,
                            w_v: take_w(&format!("W_V_{l}_{h}"))?,
                            w_o: match head_type {
                                HeadType::Multi => Some(take_w(&format!("W_O_{l}_{h}"))?),
                                HeadType::Single => None,
                            },
                        });
                    }
                    blocks.push(TfnBlock {
                        heads: hs,
                        w1: take_w(&format!("W_1_{l}"))?,
                        b1: take_b(&format!("b_1_{l}"))?,
                        w2: take_w(&format!("W_2_{l}"))?,
                        b2: take_b(&format!("b_2_{l}"))?,
                    });
                }
                let w_out = take_w("W_o")?;
                Model::Tfn(TfnModel::new(head_type, blocks, w_out).map_err(|e| bad(e.to_string()))?)
            }
            other => return Err(bad(format!("unknown model kind `{other}`"))),
        };
        if let Some(k) = self.weights.keys().next() {
            return Err(bad(format!("unexpected weight `{k}`")));
        }
        if let Some(k) = self.biases.keys().next() {
            return Err(bad(format!("unexpected bias `{k}`")));
        }
        if model.dim() != self.dim {
            return Err(bad(format!("declared dim {} but weights are {}", self.dim, model.dim())));
        }
        Ok(model)
    }
}

pub fn save(model: &Model, path: &Path) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(&ModelFile::from_model(model)).map_err(|e| bad(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Model, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    file.into_model()
}
