#![no_main]
use libfuzzer_sys::fuzz_target;
use progtune::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    // The encoding is canonical: anything that decodes re-encodes to itself.
    if let Ok(ckpt) = Checkpoint::decode(data) {
        assert_eq!(ckpt.encode(), data);
    }
});
