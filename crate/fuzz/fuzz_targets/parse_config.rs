#![no_main]
use libfuzzer_sys::fuzz_target;
use pcrlb_design_cli::{parse_config_str, Overrides};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config_str(text, &Overrides::default()) {
        let _ = cfg.hash();
        let _ = cfg.input_space();
    }
});
