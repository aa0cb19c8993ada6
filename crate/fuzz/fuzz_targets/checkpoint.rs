#![no_main]

use libfuzzer_sys::fuzz_target;
use mft_core::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.config, ck.config);
        assert_eq!(again.variant, ck.variant);
    }
});
