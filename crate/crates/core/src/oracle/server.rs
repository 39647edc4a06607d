//! Serves any [`Oracle`] over the line protocol.

use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde_json::Value;

use super::wire::{self, Handshake, Request, Response};
use super::{Capability, Oracle, PROTOCOL_VERSION};
use crate::error::Error;

fn params<T: DeserializeOwned>(req: &Request) -> Result<T, Response> {
    serde_json::from_value(req.params.clone())
        .map_err(|e| Response::err(Some(req.id), wire::INVALID_PARAMS, e.to_string()))
}

fn failed(id: u64, e: Error) -> Response {
    let code = match e {
        Error::Contract(_) | Error::Ingestion(_) | Error::Rle(_) => wire::INVALID_PARAMS,
        _ => wire::INTERNAL_ERROR,
    };
    Response::err(Some(id), code, e.to_string())
}

fn to_value<T: serde::Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("payloads always serialize")
}

/// Answers one request.
pub fn dispatch(oracle: &dyn Oracle, req: &Request) -> Response {
    match handle(oracle, req) {
        Ok(r) | Err(r) => r,
    }
}

fn handle(oracle: &dyn Oracle, req: &Request) -> Result<Response, Response> {
    let id = req.id;
    if req.method == wire::HANDSHAKE {
        return Ok(Response::ok(
            id,
            to_value(Handshake {
                protocol_version: PROTOCOL_VERSION,
                capabilities: oracle.capabilities(),
            }),
        ));
    }
    let Some(cap) = Capability::ALL.into_iter().find(|c| c.method() == req.method) else {
        return Err(Response::err(
            Some(id),
            wire::METHOD_NOT_FOUND,
            format!("unknown method `{}`", req.method),
        ));
    };
    if !oracle.capabilities().contains(&cap) {
        return Err(Response::err(
            Some(id),
            wire::METHOD_NOT_FOUND,
            format!("capability `{}` is not configured", cap.method()),
        ));
    }
    let result = match cap {
        Capability::Predict => {
            let p: wire::PredictParams = params(req)?;
            let images = p
                .images
                .iter()
                .map(wire::ImagePayload::decode)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| failed(id, e))?;
            let probabilities = oracle.predict(&images).map_err(|e| failed(id, e))?;
            to_value(wire::PredictResult { probabilities })
        }
        Capability::SegmentPoints => {
            let p: wire::SegmentPointsParams = params(req)?;
            let image = p.image.decode().map_err(|e| failed(id, e))?;
            let points: Vec<(usize, usize)> = p.points.iter().map(|[x, y]| (*x, *y)).collect();
            if let Some((x, y)) = points
                .iter()
                .find(|(x, y)| *x >= image.width() || *y >= image.height())
            {
                return Err(Response::err(
                    Some(id),
                    wire::INVALID_PARAMS,
                    format!("point ({x}, {y}) outside image"),
                ));
            }
            let masks = oracle
                .segment_points(&image, &points)
                .map_err(|e| failed(id, e))?;
            to_value(wire::MasksResult::encode(&masks))
        }
        Capability::SegmentBoxes => {
            let p: wire::SegmentBoxesParams = params(req)?;
            let image = p.image.decode().map_err(|e| failed(id, e))?;
            let boxes = p
                .boxes
                .into_iter()
                .map(wire::box_from_wire)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| failed(id, e))?;
            if boxes.iter().any(|b| !b.fits(image.width(), image.height())) {
                return Err(Response::err(
                    Some(id),
                    wire::INVALID_PARAMS,
                    "box outside image",
                ));
            }
            let masks = oracle
                .segment_boxes(&image, &boxes)
                .map_err(|e| failed(id, e))?;
            to_value(wire::MasksResult::encode(&masks))
        }
        Capability::Heatmap => {
            let p: wire::HeatmapParams = params(req)?;
            let image = p.image.decode().map_err(|e| failed(id, e))?;
            let map = oracle
                .heatmap(&image, p.target_class)
                .map_err(|e| failed(id, e))?;
            to_value(wire::HeatmapPayload::encode(&map))
        }
        Capability::Superpixels => {
            let p: wire::SuperpixelParams = params(req)?;
            let image = p.image.decode().map_err(|e| failed(id, e))?;
            let s = oracle.superpixels(&image, p.k).map_err(|e| failed(id, e))?;
            to_value(wire::SuperpixelPayload::encode(&s))
        }
    };
    Ok(Response::ok(id, result))
}

/// Answers one line. Unparseable lines get an error frame with a null id.
pub fn respond_line(oracle: &dyn Oracle, line: &str) -> Response {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return Response::err(None, wire::PARSE_ERROR, e.to_string()),
    };
    let id = value.get("id").and_then(Value::as_u64);
    match serde_json::from_value::<Request>(value) {
        Ok(req) => dispatch(oracle, &req),
        Err(e) => Response::err(id, wire::INVALID_REQUEST, e.to_string()),
    }
}

/// Serves frames until the reader reaches end of input.
pub fn serve(oracle: &dyn Oracle, reader: impl BufRead, mut writer: impl Write) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writer.write_all(wire::to_line(&respond_line(oracle, &line)).as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(oracle: Arc<dyn Oracle>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let oracle = Arc::clone(&oracle);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => io::BufReader::new(s),
                Err(e) => {
                    log::error!("failed to clone connection: {e}");
                    return;
                }
            };
            if let Err(e) = serve(oracle.as_ref(), reader, stream) {
                log::warn!("connection ended with error: {e}");
            }
        });
    }
    Ok(())
}
