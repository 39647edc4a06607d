//! Frame and payload formats of the oracle protocol.
//!
//! Every frame is one UTF-8 JSON object terminated by `\n`. Requests carry
//! `{id, method, params}`; responses carry `{id, result}` or
//! `{id, error: {code, message}}`. Pixel buffers travel as base64 of
//! row-major little-endian 32-bit values; masks travel as run-length text.
//!
//! The first exchange on a connection is a `handshake` request carrying the
//! engine's `protocol_version` and wanted `capabilities`; the endpoint answers
//! with its own version and offered capabilities.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Capability;
use crate::concepts::{HeatMap, SuperpixelSet};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, BoundingBox, Image};
use crate::rle;

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;

pub const HANDSHAKE: &str = "handshake";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorObject {
    pub code: i64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorObject>,
}

impl Response {
    pub fn ok(id: u64, result: Value) -> Self {
        Self {
            id: Some(id),
            result: Some(result),
            error: None,
        }
    }

    pub fn err(id: Option<u64>, code: i64, message: impl Into<String>) -> Self {
        Self {
            id,
            result: None,
            error: Some(ErrorObject {
                code,
                message: message.into(),
            }),
        }
    }
}

/// Serializes a frame with its trailing line feed.
pub fn to_line<T: Serialize>(frame: &T) -> String {
    let mut s = serde_json::to_string(frame).expect("frames always serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub capabilities: Vec<Capability>,
}

fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Ingestion(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Ingestion("payload is not a whole number of f32 values".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_u32(values: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_u32(text: &str) -> Result<Vec<u32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Ingestion(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Ingestion("payload is not a whole number of u32 values".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: String,
}

impl ImagePayload {
    pub fn encode(image: &Image) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            channels: image.channels(),
            data: encode_f32(image.data()),
        }
    }

    pub fn decode(&self) -> Result<Image> {
        Image::new(self.width, self.height, self.channels, decode_f32(&self.data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPayload {
    pub width: usize,
    pub height: usize,
    pub scores: String,
}

impl HeatmapPayload {
    pub fn encode(map: &HeatMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            scores: encode_f32(map.scores()),
        }
    }

    pub fn decode(&self) -> Result<HeatMap> {
        HeatMap::new(self.width, self.height, decode_f32(&self.scores)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelPayload {
    pub width: usize,
    pub height: usize,
    pub labels: String,
    #[serde(default)]
    pub ranking: Option<Vec<u32>>,
}

impl SuperpixelPayload {
    pub fn encode(s: &SuperpixelSet) -> Self {
        Self {
            width: s.width(),
            height: s.height(),
            labels: encode_u32(s.labels()),
            ranking: s.ranking().map(<[u32]>::to_vec),
        }
    }

    pub fn decode(&self) -> Result<SuperpixelSet> {
        SuperpixelSet::new(
            self.width,
            self.height,
            decode_u32(&self.labels)?,
            self.ranking.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictParams {
    pub images: Vec<ImagePayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResult {
    pub probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPointsParams {
    pub image: ImagePayload,
    pub points: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentBoxesParams {
    pub image: ImagePayload,
    pub boxes: Vec<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksResult {
    pub masks: Vec<String>,
}

impl MasksResult {
    pub fn encode(masks: &[BinaryMask]) -> Self {
        Self {
            masks: masks.iter().map(rle::encode).collect(),
        }
    }

    pub fn decode(&self, width: usize, height: usize) -> Result<Vec<BinaryMask>> {
        self.masks
            .iter()
            .map(|m| rle::decode(m, width, height))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapParams {
    pub image: ImagePayload,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelParams {
    pub image: ImagePayload,
    pub k: usize,
}

pub fn box_to_wire(b: &BoundingBox) -> [usize; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

pub fn box_from_wire(b: [usize; 4]) -> Result<BoundingBox> {
    BoundingBox::new(b[0], b[1], b[2], b[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_shapes() {
        let req = Request {
            id: 3,
            method: "heatmap".into(),
            params: serde_json::json!({"k": 2}),
        };
        assert_eq!(
            to_line(&req),
            "{\"id\":3,\"method\":\"heatmap\",\"params\":{\"k\":2}}\n"
        );
        assert_eq!(
            to_line(&Response::ok(3, serde_json::json!({"masks": []}))),
            "{\"id\":3,\"result\":{\"masks\":[]}}\n"
        );
        assert_eq!(
            to_line(&Response::err(None, PARSE_ERROR, "bad")),
            "{\"id\":null,\"error\":{\"code\":-32700,\"message\":\"bad\"}}\n"
        );
        let hs = Handshake {
            protocol_version: 1,
            capabilities: vec![Capability::Predict, Capability::SegmentBoxes],
        };
        assert_eq!(
            serde_json::to_string(&hs).unwrap(),
            "{\"protocol_version\":1,\"capabilities\":[\"predict\",\"segment_boxes\"]}"
        );
    }

    #[test]
    fn image_bytes_are_little_endian() {
        let img = Image::new(1, 1, 1, vec![1.0]).unwrap();
        // 1.0f32 = 0x3f800000 -> bytes 00 00 80 3f.
        assert_eq!(ImagePayload::encode(&img).data, STANDARD.encode([0, 0, 0x80, 0x3f]));
    }

    #[test]
    fn rejects_truncated_payload() {
        let p = ImagePayload {
            width: 1,
            height: 1,
            channels: 1,
            data: STANDARD.encode([0u8, 0, 0]),
        };
        assert!(p.decode().is_err());
    }

    proptest! {
        #[test]
        fn image_payload_round_trip(data in proptest::collection::vec(0.0f32..=1.0, 12)) {
            let img = Image::new(2, 2, 3, data).unwrap();
            let json = serde_json::to_string(&ImagePayload::encode(&img)).unwrap();
            let back: ImagePayload = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back.decode().unwrap(), img);
        }
    }
}
