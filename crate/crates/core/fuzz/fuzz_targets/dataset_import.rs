#![no_main]

use libfuzzer_sys::fuzz_target;
use mesc::corpus::{read_ildc_csv, read_lexglue_jsonl, Corpus, LoadOptions, Split, Task};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_ildc_csv(data) {
        let _ = Corpus::from_records(records, Task::Binary, &LoadOptions::default());
    }
    if let Ok(records) = read_lexglue_jsonl(data, Split::Train, "doc") {
        let _ = Corpus::from_records(records, Task::Multilabel, &LoadOptions::default());
    }
});
