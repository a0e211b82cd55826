#![no_main]

use libfuzzer_sys::fuzz_target;
use zsrlab::models::Checkpoint;

fuzz_target!(|data: &[u8]| {
    // decoding must never panic, and anything it accepts must round-trip
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes().expect("accepted checkpoint must re-encode");
        let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(ckpt.arch, again.arch);
        assert_eq!(ckpt.meta, again.meta);
        assert_eq!(ckpt.tensors.len(), again.tensors.len());
    }
});
