#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(shards) = fedbn_core::partition::read_manifest(data) {
        let mut out = Vec::new();
        fedbn_core::partition::write_manifest(&shards, &mut out).unwrap();
        assert_eq!(fedbn_core::partition::read_manifest(out.as_slice()).unwrap(), shards);
    }
});
