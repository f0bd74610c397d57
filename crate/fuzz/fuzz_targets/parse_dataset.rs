#![no_main]

use libfuzzer_sys::fuzz_target;
use osmcaa::data;

fuzz_target!(|bytes: &[u8]| {
    let Ok(text) = std::str::from_utf8(bytes) else {
        return;
    };
    if let Ok(ds) = data::parse(text) {
        let _ = ds.num_classes();
        let again = data::parse(&data::to_text(&ds)).expect("written datasets parse");
        assert_eq!(again, ds);
    }
});
