#![no_main]

use codecalign::align::RewardModel;
use codecalign::ar::ArPolicy;
use codecalign::ckpt::{Checkpoint, ModelKind};
use codecalign::nar::NarModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint parses").to_bytes(), bytes);
        let _ = ArPolicy::from_checkpoint(&c, ModelKind::Ar);
        let _ = NarModel::from_checkpoint(&c);
        let _ = RewardModel::from_checkpoint(&c);
    }
});
