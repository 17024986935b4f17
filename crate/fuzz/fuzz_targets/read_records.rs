#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = fedbn_core::diagnostics::read_records(data, "fuzz") {
        let mut out = Vec::new();
        fedbn_core::diagnostics::write_records(&records, &mut out).unwrap();
        let again = fedbn_core::diagnostics::read_records(out.as_slice(), "fuzz").unwrap();
        assert_eq!(again.len(), records.len());
    }
});
