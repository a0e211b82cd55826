#![no_main]

use libfuzzer_sys::fuzz_target;
use zsrlab::models::TextBank;

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = TextBank::from_json_bytes(data) {
        // accepted banks satisfy their shape invariant and round-trip
        assert_eq!(bank.rows.len(), bank.len() * bank.d_embed);
        let bytes = bank.to_json_bytes().expect("accepted bank must re-encode");
        let again = TextBank::from_json_bytes(&bytes).expect("re-encoded bank must decode");
        assert_eq!(bank.names, again.names);
        assert_eq!(bank.d_embed, again.d_embed);
    }
});
