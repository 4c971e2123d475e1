//! Identified-model files: JSON with explicit dimension fields and row-major
//! matrix arrays, one schema per model family.

use dmpc::neural::{Activation, Layer, RnnModel, SsnnModel};
use dmpc::numerics::{Matrix, Vector};
use dmpc::pem::PemParams;
use dmpc::plants::LinearModel;
use dmpc::spc::SpcPredictor;
use serde::Serialize;
use std::path::Path;

#[derive(Serialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

fn vec_json(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Serialize)]
pub struct LayerJson {
    pub weight: MatrixJson,
    pub bias: Vec<f64>,
    pub activation: &'static str,
}

impl From<&Layer> for LayerJson {
    fn from(l: &Layer) -> Self {
        LayerJson {
            weight: MatrixJson::from(&l.weight),
            bias: vec_json(&l.bias),
            activation: match l.activation {
                Activation::Tanh => "tanh",
                Activation::Identity => "identity",
            },
        }
    }
}

#[derive(Serialize)]
pub struct Metadata {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_error: Option<f64>,
}

#[derive(Serialize)]
#[serde(tag = "kind")]
pub enum ModelJson {
    #[serde(rename = "linear")]
    Linear {
        dims: LinearDims,
        a: MatrixJson,
        b: MatrixJson,
        c: MatrixJson,
        #[serde(skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        singular_values: Option<Vec<f64>>,
        metadata: Metadata,
    },
    #[serde(rename = "spc_predictor")]
    SpcPredictor {
        dims: SubspaceDims,
        p1: MatrixJson,
        p2: MatrixJson,
        b_y: MatrixJson,
        metadata: Metadata,
    },
    #[serde(rename = "deepc_data")]
    DeepcData {
        dims: SubspaceDims,
        alpha: f64,
        up: MatrixJson,
        yp: MatrixJson,
        uf: MatrixJson,
        yf: MatrixJson,
        metadata: Metadata,
    },
    #[serde(rename = "rnn")]
    Rnn {
        dims: NetDims,
        layers: Vec<LayerJson>,
        metadata: Metadata,
    },
    #[serde(rename = "ssnn")]
    Ssnn {
        dims: NetDims,
        state_net: Vec<LayerJson>,
        output_net: Vec<LayerJson>,
        x0: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        state_variances: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        retained_order: Option<usize>,
        metadata: Metadata,
    },
}

#[derive(Serialize)]
pub struct LinearDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

#[derive(Serialize)]
pub struct SubspaceDims {
    pub m: usize,
    pub p: usize,
    pub future: usize,
    pub past: usize,
    pub columns: usize,
}

#[derive(Serialize)]
pub struct NetDims {
    pub l: usize,
    pub m: usize,
    pub p: usize,
}

pub fn linear_model_json(
    model: &LinearModel,
    x0: Option<&Vector>,
    singular_values: Option<&Vector>,
    metadata: Metadata,
) -> ModelJson {
    ModelJson::Linear {
        dims: LinearDims {
            n: model.order(),
            m: model.n_inputs(),
            p: model.n_outputs(),
        },
        a: MatrixJson::from(&model.a),
        b: MatrixJson::from(&model.b),
        c: MatrixJson::from(&model.c),
        x0: x0.map(vec_json),
        singular_values: singular_values.map(vec_json),
        metadata,
    }
}

pub fn pem_json(params: &PemParams, metadata: Metadata) -> ModelJson {
    linear_model_json(&params.model, Some(&params.x0), None, metadata)
}

pub fn spc_json(pred: &SpcPredictor, columns: usize, metadata: Metadata) -> ModelJson {
    ModelJson::SpcPredictor {
        dims: SubspaceDims {
            m: pred.n_inputs,
            p: pred.n_outputs,
            future: pred.future,
            past: pred.past,
            columns,
        },
        p1: MatrixJson::from(&pred.p1),
        p2: MatrixJson::from(&pred.p2),
        b_y: MatrixJson::from(&pred.b_y),
        metadata,
    }
}

pub fn deepc_json(
    blocks: &dmpc::hankel::HankelBlocks,
    alpha: f64,
    m: usize,
    p: usize,
    metadata: Metadata,
) -> ModelJson {
    ModelJson::DeepcData {
        dims: SubspaceDims {
            m,
            p,
            future: blocks.future,
            past: blocks.past,
            columns: blocks.cols,
        },
        alpha,
        up: MatrixJson::from(&blocks.up),
        yp: MatrixJson::from(&blocks.yp),
        uf: MatrixJson::from(&blocks.uf),
        yf: MatrixJson::from(&blocks.yf),
        metadata,
    }
}

pub fn rnn_json(model: &RnnModel, metadata: Metadata) -> ModelJson {
    ModelJson::Rnn {
        dims: NetDims {
            l: model.n_outputs,
            m: model.n_inputs,
            p: model.n_outputs,
        },
        layers: model.layers.iter().map(LayerJson::from).collect(),
        metadata,
    }
}

pub fn ssnn_json(
    model: &SsnnModel,
    variances: Option<&Vector>,
    retained: Option<usize>,
    metadata: Metadata,
) -> ModelJson {
    ModelJson::Ssnn {
        dims: NetDims {
            l: model.latent,
            m: model.n_inputs,
            p: model.n_outputs,
        },
        state_net: model.state_net.iter().map(LayerJson::from).collect(),
        output_net: model.output_net.iter().map(LayerJson::from).collect(),
        x0: vec_json(&model.x0),
        state_variances: variances.map(vec_json),
        retained_order: retained,
        metadata,
    }
}

pub fn write_model(path: &Path, model: &ModelJson) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(model).expect("model serializes");
    std::fs::write(path, text)
}
