#![no_main]

use libfuzzer_sys::fuzz_target;
use spdhss_bench::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // The last line doubles as an override so both code paths see the input.
    let overrides: Vec<String> = text.lines().last().map(|l| vec![l.to_string()]).unwrap_or_default();
    if let Ok(cfg) = ExperimentConfig::parse(text, &[]) {
        cfg.validate().unwrap();
        let _ = cfg.hash();
    }
    let _ = ExperimentConfig::parse("", &overrides);
});
