#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use mft_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rc) = RunConfig::parse(text, Path::new("/fuzz")) {
        let again = RunConfig::parse(&rc.render(), Path::new("/fuzz")).expect("echoed config parses");
        assert_eq!(again, rc);
    }
});
