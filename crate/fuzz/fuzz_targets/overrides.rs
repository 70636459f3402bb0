#![no_main]

use dpzero::harness::apply_overrides_to_json;
use libfuzzer_sys::fuzz_target;

// Input layout: config document, then one `key=value` per line after a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (doc, rest) = text.split_once('\0').unwrap_or((text, ""));
    let sets: Vec<&str> = rest.lines().collect();
    let _ = apply_overrides_to_json(doc, &sets);
});
