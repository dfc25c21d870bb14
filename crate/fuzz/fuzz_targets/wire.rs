#![no_main]

use kip::distrib::wire::{decode, decode_payload, encode, read_message};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((msg, used)) = decode(data) {
        assert!(used <= data.len());
        let (again, n) = decode(&encode(&msg)).expect("re-encoded frame decodes");
        assert_eq!(n, encode(&msg).len());
        assert_eq!(encode(&again), encode(&msg));
    }
    let _ = read_message(&mut &data[..]);
    if let Some((&kind, payload)) = data.split_first() {
        let _ = decode_payload(kind, payload);
    }
});
