use std::io::{self, Read};

use super::ProtocolError;

/// Upper bound on the `length` field.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;
pub const MAX_PAYLOAD_LEN: usize = MAX_FRAME_LEN as usize - 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u16,
    pub request_id: u32,
    pub payload: Vec<u8>,
}

pub fn encode_frame(msg_type: u16, request_id: u32, payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    if payload.len() > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::PayloadTooLarge(payload.len()));
    }
    let length = 6 + payload.len() as u32;
    let mut out = Vec::with_capacity(4 + length as usize);
    out.extend_from_slice(&length.to_be_bytes());
    out.extend_from_slice(&msg_type.to_be_bytes());
    out.extend_from_slice(&request_id.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Reads exactly one frame. A clean close before the first byte is
/// [`ProtocolError::Closed`]; a close anywhere later is `Truncated`.
pub fn decode_frame<R: Read>(stream: &mut R) -> Result<Frame, ProtocolError> {
    let mut len_buf = [0u8; 4];
    let got = read_full(stream, &mut len_buf)?;
    if got == 0 {
        return Err(ProtocolError::Closed);
    }
    if got < 4 {
        return Err(ProtocolError::Truncated);
    }
    let length = u32::from_be_bytes(len_buf);
    if length > MAX_FRAME_LEN {
        return Err(ProtocolError::OversizedFrame(length));
    }
    if length < 6 {
        return Err(ProtocolError::Malformed(format!(
            "frame length {length} below header size"
        )));
    }
    let mut header = [0u8; 6];
    if read_full(stream, &mut header)? < 6 {
        return Err(ProtocolError::Truncated);
    }
    let mut payload = vec![0u8; length as usize - 6];
    if read_full(stream, &mut payload)? < payload.len() {
        return Err(ProtocolError::Truncated);
    }
    Ok(Frame {
        msg_type: u16::from_be_bytes([header[0], header[1]]),
        request_id: u32::from_be_bytes([header[2], header[3], header[4], header[5]]),
        payload,
    })
}

fn read_full<R: Read>(stream: &mut R, buf: &mut [u8]) -> Result<usize, ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn result_frame_layout() {
        let bytes = encode_frame(9, 7, &[]).unwrap();
        assert_eq!(bytes, [0, 0, 0, 6, 0, 9, 0, 0, 0, 7]);
    }

    #[test]
    fn payload_bound() {
        let big = vec![0u8; 64 * 1024 * 1024];
        assert!(matches!(
            encode_frame(1, 1, &big),
            Err(ProtocolError::PayloadTooLarge(_))
        ));
        assert!(encode_frame(1, 1, &big[..MAX_PAYLOAD_LEN]).is_ok());
    }

    #[test]
    fn back_to_back_frames() {
        let mut wire = encode_frame(1, 1, b"abc").unwrap();
        wire.extend(encode_frame(2, 2, b"").unwrap());
        let mut cur = Cursor::new(wire);
        let a = decode_frame(&mut cur).unwrap();
        let b = decode_frame(&mut cur).unwrap();
        assert_eq!((a.msg_type, a.request_id, a.payload.as_slice()), (1, 1, &b"abc"[..]));
        assert_eq!((b.msg_type, b.request_id), (2, 2));
        assert!(matches!(decode_frame(&mut cur), Err(ProtocolError::Closed)));
    }

    #[test]
    fn oversized_rejected_before_allocation() {
        let mut cur = Cursor::new(vec![0xff, 0xff, 0xff, 0xff, 0, 1]);
        assert!(matches!(
            decode_frame(&mut cur),
            Err(ProtocolError::OversizedFrame(0xffff_ffff))
        ));
    }

    #[test]
    fn truncated_header() {
        let mut cur = Cursor::new(vec![0, 0, 0]);
        assert!(matches!(decode_frame(&mut cur), Err(ProtocolError::Truncated)));
    }

    #[test]
    fn truncation_sweep() {
        let wire = encode_frame(4, 0xdead_beef, b"some payload bytes").unwrap();
        for cut in 1..wire.len() {
            let mut cur = Cursor::new(wire[..cut].to_vec());
            assert!(
                matches!(decode_frame(&mut cur), Err(ProtocolError::Truncated)),
                "cut at {cut}"
            );
        }
    }

    proptest! {
        #[test]
        fn frame_round_trip(t in any::<u16>(), id in any::<u32>(), payload in proptest::collection::vec(any::<u8>(), 0..2048)) {
            let wire = encode_frame(t, id, &payload).unwrap();
            let f = decode_frame(&mut Cursor::new(wire)).unwrap();
            prop_assert_eq!(f, Frame { msg_type: t, request_id: id, payload });
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_frame(&mut Cursor::new(bytes));
        }
    }
}
