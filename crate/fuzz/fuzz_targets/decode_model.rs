#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = fedbn_core::model_io::decode(data) {
        assert_eq!(fedbn_core::model_io::encode(&file), data);
    }
});
