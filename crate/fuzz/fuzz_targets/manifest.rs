#![no_main]

use libfuzzer_sys::fuzz_target;
use mft_core::data::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::parse(text, "/fuzz") {
        // Anything accepted must survive a render/parse cycle unchanged.
        let again = DatasetManifest::parse(&m.render(), "/fuzz").expect("rendered manifest parses");
        assert_eq!(again, m);
    }
});
