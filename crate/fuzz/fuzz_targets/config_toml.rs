#![no_main]

use codecalign_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_toml(text) else { return };
    if cfg.validate().is_ok() {
        let s = cfg.to_toml().expect("valid config serializes");
        assert_eq!(ExperimentConfig::from_toml(&s).expect("re-encoded config parses"), cfg);
    }
});
