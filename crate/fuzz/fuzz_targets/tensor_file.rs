#![no_main]

use libfuzzer_sys::fuzz_target;
use mft_core::data::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    // First byte picks a shape so both matching and mismatched lengths occur.
    let Some((&pick, body)) = data.split_first() else { return };
    let shape = match pick % 4 {
        0 => vec![body.len() / 8],
        1 => vec![2, body.len() / 16],
        2 => vec![3, 1, 2],
        _ => vec![usize::from(pick)],
    };
    if let Ok(t) = decode_tensor(body, &shape) {
        assert_eq!(encode_tensor(&t), body);
    }
});
