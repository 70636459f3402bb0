#![no_main]

use dpzero::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_json(text) {
            let printed = cfg.to_json_pretty();
            let back = ExperimentConfig::from_json(&printed).expect("reparse printed config");
            assert_eq!(back.to_json_pretty(), printed);
        }
    }
});
