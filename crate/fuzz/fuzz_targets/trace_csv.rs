#![no_main]

use dpzero::harness::{parse_trace_csv, trace_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = parse_trace_csv(text) {
            let out = trace_to_csv(&trace).expect("write accepted trace");
            parse_trace_csv(&out).expect("reparse written trace");
        }
    }
});
