#![no_main]

use codecalign::prefs::PreferenceDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = PreferenceDataset::from_jsonl(text) {
        let back = PreferenceDataset::from_jsonl(&ds.to_jsonl()).expect("re-encoded dataset parses");
        assert_eq!(back.hash(), ds.hash());
    }
});
