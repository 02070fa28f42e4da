#![no_main]

use libfuzzer_sys::fuzz_target;
use spanedit_cli::records::{format_decode_line, parse_decode_line};

// Accepted decode lines re-serialize to a line that parses to the same record.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = parse_decode_line(text, 1) {
        assert_eq!(parse_decode_line(&format_decode_line(&rec), 1).unwrap(), rec);
    }
});
