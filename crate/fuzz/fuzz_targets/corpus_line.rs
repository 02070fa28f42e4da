#![no_main]

use libfuzzer_sys::fuzz_target;
use spanedit::corpus::{format_line, parse_line};

// Accepted lines re-serialize to a line that parses to the same example.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ex) = parse_line(text, 1) {
        assert_eq!(parse_line(&format_line(&ex), 1).unwrap(), ex);
    }
});
