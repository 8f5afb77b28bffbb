mod common;

use std::io::Cursor;

use proptest::prelude::*;

use splatbus::wire::{
    decode_envelope, encode_envelope, parse_message, serialize_message, write_message, EnvelopeAssembler, ErrorCode,
    WireError, MAX_PAYLOAD_LEN,
};

proptest! {
    #[test]
    fn envelope_round_trips(payload in proptest::collection::vec(any::<u8>(), 0..2048)) {
        let framed = encode_envelope(&payload).unwrap();
        prop_assert_eq!(framed.len(), payload.len() + 4);
        prop_assert_eq!(u32::from_be_bytes(framed[..4].try_into().unwrap()) as usize, payload.len());
        let mut c = Cursor::new(&framed);
        prop_assert_eq!(decode_envelope(&mut c).unwrap().payload, payload);
        prop_assert!(matches!(decode_envelope(&mut c), Err(WireError::Closed)));
    }

    #[test]
    fn generated_messages_round_trip(seed in any::<u64>(), schema in 0usize..6) {
        let msg = common::random_message(&mut common::rng(seed), schema);
        let text = serialize_message(&msg).unwrap();
        let back = parse_message(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(serialize_message(&back).unwrap(), text);
    }

    #[test]
    fn arbitrary_bytes_never_panic_and_errors_carry_codes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        if let Err(e) = parse_message(&bytes) {
            prop_assert!(matches!(e.error_code(), Some(ErrorCode::Malformed | ErrorCode::Unsupported)));
        }
        let mut c = Cursor::new(&bytes);
        loop {
            match decode_envelope(&mut c) {
                Ok(env) => { let _ = parse_message(&env.payload); }
                Err(WireError::Closed | WireError::Incomplete { .. } | WireError::Oversize { .. }) => break,
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }

    #[test]
    fn assembler_matches_sequential_decoding(
        seeds in proptest::collection::vec(any::<u64>(), 1..12),
        cuts in proptest::collection::vec(1usize..64, 1..40),
    ) {
        let msgs: Vec<_> = seeds.iter().enumerate().map(|(i, s)| common::random_message(&mut common::rng(*s), i % 6)).collect();
        let mut stream = Vec::new();
        for m in &msgs {
            write_message(&mut stream, m).unwrap();
        }
        let mut asm = EnvelopeAssembler::new();
        let mut got = Vec::new();
        let mut pos = 0;
        let mut k = 0;
        while pos < stream.len() {
            let end = (pos + cuts[k % cuts.len()]).min(stream.len());
            k += 1;
            asm.push(&stream[pos..end]);
            pos = end;
            while let Some(p) = asm.next_payload().unwrap() {
                got.push(parse_message(&p).unwrap());
            }
        }
        prop_assert_eq!(asm.pending(), 0);
        prop_assert_eq!(got, msgs);
    }
}

#[test]
fn assembler_reports_oversize_from_the_prefix_alone() {
    let mut asm = EnvelopeAssembler::new();
    asm.push(&((MAX_PAYLOAD_LEN as u32) + 1).to_be_bytes());
    assert!(matches!(asm.next_payload(), Err(WireError::Oversize { .. })));
    let mut asm = EnvelopeAssembler::new();
    asm.push(&(MAX_PAYLOAD_LEN as u32).to_be_bytes());
    assert!(matches!(asm.next_payload(), Ok(None)));
}

#[test]
fn payload_exactly_at_cap_decodes() {
    let payload = vec![b'x'; MAX_PAYLOAD_LEN];
    let framed = encode_envelope(&payload).unwrap();
    assert_eq!(decode_envelope(&mut Cursor::new(framed)).unwrap().payload.len(), MAX_PAYLOAD_LEN);
}

#[test]
fn every_schema_is_tagged_by_its_type_name() {
    let mut rng = common::rng(7);
    for (schema, name) in ["hello", "init", "camera_pose", "object_pose", "telemetry", "error"].iter().enumerate() {
        let msg = common::random_message(&mut rng, schema);
        assert_eq!(msg.type_name(), *name);
        let v: serde_json::Value = serde_json::from_str(&serialize_message(&msg).unwrap()).unwrap();
        assert_eq!(v["type"], *name);
    }
}
