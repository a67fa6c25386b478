#![no_main]

use flowsr_core::grid::{Granularity, Precision};
use flowsr_core::gridfile::{import_csv, CsvGridOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let opts = CsvGridOptions { granularity: Granularity::Fine, upscale: 2, slots_per_day: 48, precision: Precision::F64 };
    let _ = import_csv(data, opts);
});
