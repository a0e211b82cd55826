#![no_main]

use libfuzzer_sys::fuzz_target;
use zsrlab::data::Dataset;

// Input framing: [u32 meta_len][meta][u32 image_len][images][labels...];
// a trailing empty label section means "unlabeled".
fuzz_target!(|data: &[u8]| {
    let Some((meta, rest)) = take_section(data) else { return };
    let Some((images, labels)) = take_section(rest) else { return };
    let labels = (!labels.is_empty()).then_some(labels);
    if let Ok(ds) = Dataset::from_parts(meta, images, labels) {
        // accepted datasets satisfy their size and range invariants
        assert_eq!(ds.images.len(), ds.len() * ds.image_len());
        assert!(ds.images.iter().all(|v| v.is_finite()));
        if let Some(l) = &ds.labels {
            assert_eq!(l.len(), ds.len());
            assert!(l.iter().all(|&y| (y as usize) < ds.classes.len()));
        }
    }
});

fn take_section(data: &[u8]) -> Option<(&[u8], &[u8])> {
    let len = u32::from_le_bytes(data.get(..4)?.try_into().ok()?) as usize;
    let rest = &data[4..];
    if len > rest.len() {
        return None;
    }
    Some(rest.split_at(len))
}
