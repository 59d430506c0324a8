#![no_main]

use codecalign::World;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = World::from_bytes(data) {
        let bytes = w.to_bytes();
        let again = World::from_bytes(&bytes).expect("re-encoded world parses");
        assert_eq!(again.to_bytes(), bytes);
        let _ = w.transcribe(0, &[0; 4]);
    }
});
