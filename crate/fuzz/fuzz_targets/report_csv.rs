#![no_main]

use libfuzzer_sys::fuzz_target;
use mft_core::metrics::MetricsReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = MetricsReport::from_csv(text) {
        let csv = report.to_csv();
        let again = MetricsReport::from_csv(&csv).expect("written report parses");
        assert_eq!(again.to_csv(), csv);
    }
});
