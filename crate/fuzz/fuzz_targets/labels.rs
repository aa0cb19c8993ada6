#![no_main]

use libfuzzer_sys::fuzz_target;
use mft_core::data::{format_labels, parse_labels};

fuzz_target!(|data: &[u8]| {
    let Some((&n, body)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(body) else { return };
    if let Ok(labels) = parse_labels(text, usize::from(n % 32)) {
        assert_eq!(parse_labels(&format_labels(&labels), labels.len()).unwrap(), labels);
    }
});
