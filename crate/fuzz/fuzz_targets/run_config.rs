#![no_main]

use libfuzzer_sys::fuzz_target;
use spanedit_cli::RunConfig;

// Accepted configs round-trip through their rendered text.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_text(text) {
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
});
