#![no_main]

use libfuzzer_sys::fuzz_target;
use nwflow::experiments::{self, NAMES};
use nwflow::tasks::TaskSpec;
use nwflow::IntegratorConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<TaskSpec>(data) {
        let _ = spec.validate();
        let _ = spec.dim();
    }
    if let Ok(cfg) = serde_json::from_slice::<IntegratorConfig>(data) {
        let _ = cfg.validate();
    }
    let Ok(patch) = serde_json::from_slice::<serde_json::Value>(data) else {
        return;
    };
    for name in NAMES {
        let mut base = experiments::default_config(name).unwrap();
        let _ = experiments::merge_config(&mut base, &patch);
    }
});
