//! Tiny ONNX graphs and a word-level tokenizer for runtime backend tests.
//!
//! image encoder: mean of each normalized channel, times `W` plus `b`.
//! text encoder: mean of token embedding rows (padding row is zero).
//! detector: patch `p` scores query `q` by `(A[p] * img) . txt[q]`, boxes are
//! constants.

use std::collections::BTreeMap;
use std::path::Path;

use prost::Message;
use tract_onnx::pb::{
    attribute_proto::AttributeType, tensor_proto::DataType, tensor_shape_proto::dimension,
    tensor_shape_proto::Dimension, type_proto, AttributeProto, GraphProto, ModelProto, NodeProto,
    OperatorSetIdProto, TensorProto, TensorShapeProto, TypeProto, ValueInfoProto,
};

pub const SIDE: u32 = 8;
pub const DIM: usize = 4;
pub const CONTEXT: usize = 6;
pub const MEAN: [f32; 3] = [0.5, 0.4, 0.3];
pub const STD: [f32; 3] = [0.25, 0.2, 0.5];

pub const VOCAB: [&str; 8] = ["[PAD]", "[UNK]", "a", "photo", "of", "cat", "dog", "car"];

pub struct Weights {
    /// `[3][DIM]`
    pub w_img: Vec<f32>,
    pub b_img: Vec<f32>,
    /// `[VOCAB][DIM]`
    pub emb: Vec<f32>,
    /// `[P][DIM]`
    pub patches: Vec<f32>,
    /// `[P][4]` normalized cx, cy, w, h
    pub boxes: Vec<f32>,
}

impl Weights {
    pub fn n_patches(&self) -> usize {
        self.patches.len() / DIM
    }
}

pub fn weights() -> Weights {
    let w_img = vec![
        1.0, 0.2, -0.3, 0.1, //
        -0.4, 0.9, 0.3, -0.2, //
        0.2, -0.1, 0.8, 0.6,
    ];
    let b_img = vec![0.05, -0.02, 0.01, 0.03];
    let mut emb = vec![0.0; VOCAB.len() * DIM];
    let rows: [[f32; DIM]; 7] = [
        [0.1, 0.1, 0.1, 0.1],
        [0.3, -0.2, 0.1, 0.0],
        [0.0, 0.4, -0.1, 0.2],
        [0.1, 0.0, 0.3, -0.3],
        [1.0, 0.1, -0.2, 0.0],
        [-0.1, 1.0, 0.2, 0.1],
        [0.0, -0.2, 0.1, 1.0],
    ];
    for (i, r) in rows.iter().enumerate() {
        emb[(i + 1) * DIM..(i + 2) * DIM].copy_from_slice(r);
    }
    let patches = vec![
        1.0, 0.5, 0.2, 0.1, //
        0.2, 1.0, 0.4, 0.3, //
        0.1, 0.3, 1.0, 0.9,
    ];
    let boxes = vec![
        0.25, 0.25, 0.5, 0.5, //
        0.75, 0.5, 0.4, 0.8, //
        0.5, 0.5, 1.0, 1.0,
    ];
    Weights {
        w_img,
        b_img,
        emb,
        patches,
        boxes,
    }
}

fn f32_tensor(name: &str, dims: &[i64], data: &[f32]) -> TensorProto {
    TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: DataType::Float as i32,
        float_data: data.to_vec(),
        ..Default::default()
    }
}

fn i64_tensor(name: &str, dims: &[i64], data: &[i64]) -> TensorProto {
    TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: DataType::Int64 as i32,
        int64_data: data.to_vec(),
        ..Default::default()
    }
}

fn value(name: &str, elem: DataType, dims: &[i64]) -> ValueInfoProto {
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: elem as i32,
                shape: Some(TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|d| Dimension {
                            value: Some(dimension::Value::DimValue(*d)),
                            ..Default::default()
                        })
                        .collect(),
                }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn ints(name: &str, v: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Ints as i32,
        ints: v.to_vec(),
        ..Default::default()
    }
}

fn int(name: &str, v: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Int as i32,
        i: v,
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], outputs: &[&str], attrs: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        op_type: op.into(),
        name: outputs[0].into(),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: outputs.iter().map(|s| s.to_string()).collect(),
        attribute: attrs,
        ..Default::default()
    }
}

fn model(graph: GraphProto) -> Vec<u8> {
    ModelProto {
        ir_version: 8,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        producer_name: "guided-crop-tests".into(),
        graph: Some(graph),
        ..Default::default()
    }
    .encode_to_vec()
}

fn image_feature_nodes(input: &str, out: &str) -> Vec<NodeProto> {
    vec![
        node(
            "ReduceMean",
            &[input],
            &["chan"],
            vec![ints("axes", &[2, 3]), int("keepdims", 0)],
        ),
        node("MatMul", &["chan", "w_img"], &["proj"], vec![]),
        node("Add", &["proj", "b_img"], &[out], vec![]),
    ]
}

pub fn image_encoder(w: &Weights) -> Vec<u8> {
    let s = SIDE as i64;
    let d = DIM as i64;
    model(GraphProto {
        name: "image_encoder".into(),
        node: image_feature_nodes("pixel_values", "image_embeds"),
        initializer: vec![
            f32_tensor("w_img", &[3, d], &w.w_img),
            f32_tensor("b_img", &[d], &w.b_img),
        ],
        input: vec![value("pixel_values", DataType::Float, &[1, 3, s, s])],
        output: vec![value("image_embeds", DataType::Float, &[1, d])],
        ..Default::default()
    })
}

pub fn text_encoder(w: &Weights, with_mask: bool) -> Vec<u8> {
    let l = CONTEXT as i64;
    let d = DIM as i64;
    let mut nodes = vec![node(
        "Gather",
        &["emb", "input_ids"],
        &["tok"],
        vec![int("axis", 0)],
    )];
    let mut inputs = vec![value("input_ids", DataType::Int64, &[1, l])];
    let pooled_in = if with_mask {
        inputs.push(value("attention_mask", DataType::Int64, &[1, l]));
        nodes.push(node(
            "Cast",
            &["attention_mask"],
            &["maskf"],
            vec![int("to", 1)],
        ));
        nodes.push(node("Unsqueeze", &["maskf", "axis2"], &["mask3"], vec![]));
        nodes.push(node("Mul", &["tok", "mask3"], &["masked"], vec![]));
        "masked"
    } else {
        "tok"
    };
    nodes.push(node(
        "ReduceMean",
        &[pooled_in],
        &["text_embeds"],
        vec![ints("axes", &[1]), int("keepdims", 0)],
    ));
    model(GraphProto {
        name: "text_encoder".into(),
        node: nodes,
        initializer: vec![
            f32_tensor("emb", &[VOCAB.len() as i64, d], &w.emb),
            i64_tensor("axis2", &[1], &[2]),
        ],
        input: inputs,
        output: vec![value("text_embeds", DataType::Float, &[1, d])],
        ..Default::default()
    })
}

pub fn detector(w: &Weights) -> Vec<u8> {
    let s = SIDE as i64;
    let d = DIM as i64;
    let l = CONTEXT as i64;
    let p = w.n_patches() as i64;
    let mut nodes = image_feature_nodes("pixel_values", "img");
    nodes.extend([
        node(
            "Gather",
            &["emb", "input_ids"],
            &["tok"],
            vec![int("axis", 0)],
        ),
        node(
            "ReduceMean",
            &["tok"],
            &["txt"],
            vec![ints("axes", &[1]), int("keepdims", 0)],
        ),
        node("Mul", &["patches", "img"], &["patch_feat"], vec![]),
        node(
            "Transpose",
            &["txt"],
            &["txt_t"],
            vec![ints("perm", &[1, 0])],
        ),
        node("MatMul", &["patch_feat", "txt_t"], &["scores"], vec![]),
        node("Unsqueeze", &["scores", "axis0"], &["logits"], vec![]),
        node("Identity", &["boxes"], &["pred_boxes"], vec![]),
    ]);
    model(GraphProto {
        name: "detector".into(),
        node: nodes,
        initializer: vec![
            f32_tensor("w_img", &[3, d], &w.w_img),
            f32_tensor("b_img", &[d], &w.b_img),
            f32_tensor("emb", &[VOCAB.len() as i64, d], &w.emb),
            f32_tensor("patches", &[p, d], &w.patches),
            f32_tensor("boxes", &[1, p, 4], &w.boxes),
            i64_tensor("axis0", &[1], &[0]),
        ],
        input: vec![
            value("pixel_values", DataType::Float, &[1, 3, s, s]),
            value("input_ids", DataType::Int64, &[-1, l]),
            value("attention_mask", DataType::Int64, &[-1, l]),
        ],
        output: vec![
            value("logits", DataType::Float, &[1, p, -1]),
            value("pred_boxes", DataType::Float, &[1, p, 4]),
        ],
        ..Default::default()
    })
}

pub fn tokenizer_json() -> String {
    let vocab: BTreeMap<&str, usize> = VOCAB.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    serde_json::json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": [],
        "normalizer": {"type": "Lowercase"},
        "pre_tokenizer": {"type": "Whitespace"},
        "post_processor": null,
        "decoder": null,
        "model": {"type": "WordLevel", "vocab": vocab, "unk_token": "[UNK]"}
    })
    .to_string()
}

pub fn manifest_json(extra: serde_json::Value) -> serde_json::Value {
    let mut m = serde_json::json!({
        "embedding_dim": DIM,
        "image_side": SIDE,
        "norm_mean": MEAN,
        "norm_std": STD,
        "context_length": CONTEXT,
        "files": {
            "image_encoder": "image_encoder.onnx",
            "text_encoder": "text_encoder.onnx",
            "detector": "detector.onnx",
            "tokenizer": "tokenizer.json"
        }
    });
    if let (Some(obj), Some(extra)) = (m.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    m
}

/// Write a complete model directory.
pub fn write_model_dir(dir: &Path, with_mask: bool) {
    let w = weights();
    std::fs::write(dir.join("image_encoder.onnx"), image_encoder(&w)).unwrap();
    std::fs::write(dir.join("text_encoder.onnx"), text_encoder(&w, with_mask)).unwrap();
    std::fs::write(dir.join("detector.onnx"), detector(&w)).unwrap();
    std::fs::write(dir.join("tokenizer.json"), tokenizer_json()).unwrap();
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest_json(serde_json::json!({}))).unwrap(),
    )
    .unwrap();
}

/// Token ids the way the test tokenizer splits text.
pub fn token_ids(text: &str) -> Vec<usize> {
    let mut ids: Vec<usize> = text
        .to_lowercase()
        .split_whitespace()
        .map(|t| VOCAB.iter().position(|v| *v == t).unwrap_or(1))
        .take(CONTEXT)
        .collect();
    ids.resize(CONTEXT, 0);
    ids
}

/// Reference image embedding: channel means of the normalized image.
pub fn image_oracle(w: &Weights, pixels: &[[f32; 3]]) -> Vec<f64> {
    let n = pixels.len() as f64;
    let mut chan = [0.0f64; 3];
    for px in pixels {
        for c in 0..3 {
            chan[c] += ((px[c] - MEAN[c]) / STD[c]) as f64 / n;
        }
    }
    (0..DIM)
        .map(|j| {
            (0..3)
                .map(|c| chan[c] * w.w_img[c * DIM + j] as f64)
                .sum::<f64>()
                + w.b_img[j] as f64
        })
        .collect()
}

/// Reference text embedding (unnormalized mean over the context window).
pub fn text_oracle(w: &Weights, text: &str) -> Vec<f64> {
    let ids = token_ids(text);
    (0..DIM)
        .map(|j| ids.iter().map(|&i| w.emb[i * DIM + j] as f64).sum::<f64>() / CONTEXT as f64)
        .collect()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
        * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}
