//! Frame codec: a 4-byte big-endian length `N` followed by `N` bytes of
//! UTF-8 JSON encoding one [`Envelope`].

use std::io::{self, Read, Write};

use crate::envelope::Envelope;
use crate::error::BusError;

pub const DEFAULT_MAX_FRAME_BYTES: usize = 1 << 20;

pub fn encode_body(env: &Envelope) -> Result<Vec<u8>, BusError> {
    Ok(serde_json::to_vec(env)?)
}

/// Encodes a full frame, refusing bodies larger than `max_frame_bytes`.
pub fn encode_frame(env: &Envelope, max_frame_bytes: usize) -> Result<Vec<u8>, BusError> {
    let body = encode_body(env)?;
    if body.len() > max_frame_bytes || body.len() > u32::MAX as usize {
        return Err(BusError::FrameTooLarge {
            size: body.len(),
            max: max_frame_bytes,
        });
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope, max_frame_bytes: usize) -> Result<(), BusError> {
    let frame = encode_frame(env, max_frame_bytes)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Result of reading one frame off a stream.
#[derive(Debug)]
pub enum RawFrame {
    /// Complete frame: the raw bytes (header included) and the body length.
    Frame(Vec<u8>),
    /// Header announced more than the limit; the body was discarded.
    Oversize(usize),
    /// Clean end of stream at a frame boundary.
    Eof,
}

pub fn read_raw_frame<R: Read>(r: &mut R, max_frame_bytes: usize) -> io::Result<RawFrame> {
    let mut header = [0u8; 4];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(RawFrame::Eof),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > max_frame_bytes {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Ok(RawFrame::Oversize(len));
    }
    let mut frame = vec![0u8; 4 + len];
    frame[..4].copy_from_slice(&header);
    r.read_exact(&mut frame[4..])?;
    Ok(RawFrame::Frame(frame))
}

pub fn decode_body(body: &[u8]) -> Result<Envelope, BusError> {
    Ok(serde_json::from_slice(body)?)
}

/// Reads and decodes one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R, max_frame_bytes: usize) -> Result<Option<Envelope>, BusError> {
    match read_raw_frame(r, max_frame_bytes)? {
        RawFrame::Eof => Ok(None),
        RawFrame::Oversize(size) => Err(BusError::FrameTooLarge {
            size,
            max: max_frame_bytes,
        }),
        RawFrame::Frame(bytes) => decode_body(&bytes[4..]).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Envelope {
        Envelope {
            key: "avp/v1/status".into(),
            sender_id: "v1".into(),
            seq: 7,
            timestamp_ns: -3,
            payload: json!({"state": "PARKED", "n": [1, 2.5]}),
        }
    }

    #[test]
    fn frame_layout_is_length_prefixed_json() {
        let frame = encode_frame(&sample(), DEFAULT_MAX_FRAME_BYTES).unwrap();
        let n = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(n, frame.len() - 4);
        let text = std::str::from_utf8(&frame[4..]).unwrap();
        assert!(text.starts_with(r#"{"key":"avp/v1/status","sender_id":"v1","seq":7,"timestamp_ns":-3,"payload":"#));
        let back = read_frame(&mut &frame[..], DEFAULT_MAX_FRAME_BYTES).unwrap().unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn oversize_is_rejected_on_both_ends() {
        let mut env = sample();
        env.payload = json!("x".repeat(200));
        assert!(matches!(
            encode_frame(&env, 100),
            Err(BusError::FrameTooLarge { max: 100, .. })
        ));
        let frame = encode_frame(&env, DEFAULT_MAX_FRAME_BYTES).unwrap();
        let mut two = frame.clone();
        two.extend_from_slice(&encode_frame(&sample(), 1000).unwrap());
        let mut cursor = &two[..];
        assert!(matches!(
            read_raw_frame(&mut cursor, 100).unwrap(),
            RawFrame::Oversize(_)
        ));
        // stream stays aligned after the discarded body
        assert_eq!(read_frame(&mut cursor, 1000).unwrap().unwrap(), sample());
        assert!(read_frame(&mut cursor, 1000).unwrap().is_none());
    }
}
