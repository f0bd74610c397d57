#![no_main]

use libfuzzer_sys::fuzz_target;
use osmcaa::checkpoint;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(ckpt) = checkpoint::decode(bytes) {
        assert_eq!(checkpoint::encode(&ckpt), bytes);
    }
});
