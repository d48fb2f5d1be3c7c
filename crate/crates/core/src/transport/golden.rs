//! Checked-in wire vectors and the messages they must decode to.

use super::wire::{decode_message, encode_message, Message, Ping, Pong};

pub struct GoldenVector {
    pub name: &'static str,
    pub bytes: &'static [u8],
    pub expected: fn() -> Message,
}

pub const VECTORS: [GoldenVector; 2] = [
    GoldenVector {
        name: "ping.bin",
        bytes: include_bytes!("../../golden/ping.bin"),
        expected: || {
            Message::Ping(Ping {
                ping_id: 0x0102_0304_0506_0708,
                sender: "node-0".into(),
                evaluations: 1000,
                fitness: 30,
                tour: vec![0, 1, 2],
            })
        },
    },
    GoldenVector {
        name: "pong.bin",
        bytes: include_bytes!("../../golden/pong.bin"),
        expected: || {
            Message::Pong(Pong {
                ping_id: 1,
                sender: "a".into(),
            })
        },
    },
];

/// Decodes every vector, compares it with its expected message and checks
/// that re-encoding reproduces the file byte for byte.
pub fn verify() -> Vec<(&'static str, Result<(), String>)> {
    VECTORS
        .iter()
        .map(|v| {
            let expected = (v.expected)();
            let res = match decode_message(v.bytes) {
                Err(e) => Err(format!("decode failed: {e}")),
                Ok(m) if m != expected => Err(format!("decoded {m:?}, expected {expected:?}")),
                Ok(m) => match encode_message(&m) {
                    Ok(b) if b == v.bytes => Ok(()),
                    Ok(_) => Err("re-encoding differs from the file".into()),
                    Err(e) => Err(format!("encode failed: {e}")),
                },
            };
            (v.name, res)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_vectors_pass() {
        for (name, res) in super::verify() {
            assert_eq!(res, Ok(()), "{name}");
        }
    }
}
