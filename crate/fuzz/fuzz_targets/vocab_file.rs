#![no_main]

use libfuzzer_sys::fuzz_target;
use spanedit::corpus::Vocab;

// Accepted vocabularies round-trip through their text form.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(vocab) = Vocab::from_text(text) {
        assert_eq!(Vocab::from_text(&vocab.to_text()).unwrap(), vocab);
    }
});
