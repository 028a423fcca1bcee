#![no_main]

use libfuzzer_sys::fuzz_target;
use medharness::volgrid::{decode_raw, parse_sidecar};

// Input layout: sidecar text, a NUL byte, then the raw voxel bytes.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|b| *b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(meta) = parse_sidecar(text) else { return };
    let raw = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(vol) = decode_raw(&meta, raw) {
        assert_eq!(vol.dims(), meta.dims);
        assert_eq!(vol.voxels().len(), raw.len() / meta.dtype.size());
    }
});
