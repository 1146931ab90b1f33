#![no_main]

use decorr_cli::config::{ExperimentConfig, Overrides, Resolved};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ExperimentConfig::from_toml_str(text) {
        // validation must reject bad values with an error, never a panic
        if let Ok(resolved) = Resolved::new(config, &Overrides::default()) {
            let again = ExperimentConfig::from_toml_str(&resolved.config.to_toml_string())
                .expect("resolved snapshot parses");
            Resolved::new(again, &Overrides::default()).expect("resolved snapshot validates");
        }
    }
});
