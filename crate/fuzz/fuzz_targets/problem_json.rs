#![no_main]

use dpzero::problems::Problem;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = Problem::from_json(text) {
            // anything accepted must survive a round trip
            let again = p.to_json().expect("serialize accepted problem");
            Problem::from_json(&again).expect("reparse serialized problem");
        }
    }
});
