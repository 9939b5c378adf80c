use infocom::codec::{decode_message, encode_message, frame_len, FrameError, MessageUnit, FRAME_HEADER_LEN};
use infocom::smg::{BitWidth, QuantizedSparseMask};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn unit_strategy() -> impl Strategy<Value = MessageUnit> {
    (1usize..=12, 1usize..=12, 1u8..=8, 1usize..=40, any::<u32>(), any::<u32>(), 1u32..=512)
        .prop_flat_map(|(h, w, bits, d, agent, frame, c)| {
            let n = h * w;
            (
                subsequence((0..n as u32).collect::<Vec<_>>(), 1..=n),
                prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), d),
                Just((h, w, bits, agent, frame, c)),
            )
        })
        .prop_flat_map(|(indices, latent, (h, w, bits, agent, frame, c))| {
            let max = (1u16 << bits) - 1;
            let k = indices.len();
            (
                Just((indices, latent, h, w, bits, agent, frame, c)),
                prop::collection::vec(0..=max as u8, k),
            )
        })
        .prop_map(|((indices, latent, h, w, bits, agent, frame, c), codes)| MessageUnit {
            agent_id: agent,
            frame_id: frame,
            channels: c,
            latent,
            mask: QuantizedSparseMask {
                height: h,
                width: w,
                indices,
                codes,
                bits: BitWidth::new(bits).unwrap(),
            },
        })
}

fn bitwise_eq(a: &MessageUnit, b: &MessageUnit) -> bool {
    a.agent_id == b.agent_id
        && a.frame_id == b.frame_id
        && a.channels == b.channels
        && a.mask == b.mask
        && a.latent.len() == b.latent.len()
        && a.latent.iter().zip(&b.latent).all(|(x, y)| x.to_bits() == y.to_bits())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_is_bit_exact(u in unit_strategy()) {
        let bytes = encode_message(&u).unwrap();
        prop_assert_eq!(bytes.len(), u.wire_len());
        prop_assert_eq!(bytes.len(), frame_len(u.latent.len(), u.mask.k(), u.mask.bits.get()));
        let back = decode_message(&bytes).unwrap();
        prop_assert!(bitwise_eq(&u, &back));
    }

    #[test]
    fn every_proper_prefix_is_rejected(u in unit_strategy(), cut in 0.0f64..1.0) {
        let bytes = encode_message(&u).unwrap();
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert_eq!(decode_message(&bytes[..n]), Err(FrameError::UnexpectedEnd));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_message(&bytes);
    }
}

fn small_unit() -> MessageUnit {
    MessageUnit {
        agent_id: 3,
        frame_id: 17,
        channels: 8,
        latent: vec![0.5, -1.25, 3.0],
        mask: QuantizedSparseMask {
            height: 4,
            width: 4,
            indices: vec![1, 6, 15],
            codes: vec![15, 0, 9],
            bits: BitWidth::new(4).unwrap(),
        },
    }
}

#[test]
fn every_single_bit_flip_is_rejected() {
    let bytes = encode_message(&small_unit()).unwrap();
    // Magic, D, b and k describe the frame itself; every other byte is only
    // protected by the checksum.
    let framing = |i: usize| i < 4 || (14..18).contains(&i) || (30..35).contains(&i);
    for bit in 0..bytes.len() * 8 {
        let mut b = bytes.clone();
        b[bit / 8] ^= 1 << (bit % 8);
        let err = decode_message(&b).expect_err("corruption must be detected");
        if !framing(bit / 8) {
            assert!(matches!(err, FrameError::CrcMismatch { .. }), "bit {bit}: {err}");
        }
    }
}

#[test]
fn named_errors() {
    let bytes = encode_message(&small_unit()).unwrap();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert_eq!(decode_message(&b), Err(FrameError::UnrecognizedFrame));
    assert_eq!(decode_message(&bytes[..FRAME_HEADER_LEN]), Err(FrameError::UnexpectedEnd));
    assert_eq!(FrameError::UnexpectedEnd.to_string(), "unexpected end of frame");
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(decode_message(&long), Err(FrameError::TrailingBytes(1)));
}

#[test]
fn version_and_monotonicity_checked_after_crc() {
    let reseal = |mut b: Vec<u8>| {
        let body = b.len() - 4;
        let crc = crc32fast::hash(&b[..body]);
        b[body..].copy_from_slice(&crc.to_le_bytes());
        b
    };
    let bytes = encode_message(&small_unit()).unwrap();
    let mut b = bytes.clone();
    b[4] = 9;
    assert_eq!(decode_message(&reseal(b)), Err(FrameError::UnsupportedVersion(9)));
    // Swap the first two indices.
    let idx = FRAME_HEADER_LEN + 3 * 4;
    let mut b = bytes.clone();
    b[idx..idx + 4].copy_from_slice(&6u32.to_le_bytes());
    b[idx + 4..idx + 8].copy_from_slice(&1u32.to_le_bytes());
    assert_eq!(decode_message(&reseal(b)), Err(FrameError::IndexMonotonicity));
}

#[test]
fn encoder_refuses_invalid_units() {
    let mut u = small_unit();
    u.mask.indices = vec![6, 1, 15];
    assert!(encode_message(&u).is_err());
    let mut u = small_unit();
    u.mask.codes[0] = 16;
    assert!(encode_message(&u).is_err());
    let mut u = small_unit();
    u.mask.indices.clear();
    u.mask.codes.clear();
    assert!(encode_message(&u).is_err());
}
