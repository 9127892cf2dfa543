use proptest::prelude::*;
use statefuzz::corpus::ingest_initial_seeds;
use statefuzz::replay::{decode, encode, read_file, write_file};
use statefuzz_core::Message;

fn messages() -> impl Strategy<Value = Vec<Message>> {
    prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64).prop_map(Message::new), 1..12)
}

proptest! {
    #[test]
    fn write_then_ingest(msgs in messages()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.seq");
        write_file(&p, &msgs).unwrap();
        prop_assert_eq!(read_file(&p).unwrap(), msgs.clone());
        let got = ingest_initial_seeds(dir.path()).unwrap();
        prop_assert_eq!(&got.seeds[0].1, &msgs);
    }

    #[test]
    fn valid_files_are_fixed_points(msgs in messages()) {
        let bytes = encode(&msgs).unwrap();
        let framing = 8 + 4 * msgs.len();
        prop_assert_eq!(bytes.len(), framing + msgs.iter().map(Message::len).sum::<usize>());
        prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        if let Ok(m) = decode(&bytes) {
            prop_assert_eq!(encode(&m).unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_is_rejected(msgs in messages(), cut in 1usize..16) {
        let bytes = encode(&msgs).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(decode(&bytes[..bytes.len() - cut]).is_err());
    }
}
