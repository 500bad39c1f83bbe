#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(seg) = text.parse::<gmdiff::schedules::SegmentSchedule>() {
            // Expansion must never panic, only report errors.
            let _ = seg.to_timesteps(1000);
        }
    }
});
