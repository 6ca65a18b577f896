#![no_main]

use libfuzzer_sys::fuzz_target;
use mesc::corpus::{parse_corpus, parse_expert, LoadOptions, Task};

// Input: corpus JSONL, then a NUL byte, then expert JSONL.
fuzz_target!(|data: &[u8]| {
    let (corpus, expert) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    for task in [Task::Binary, Task::Multiclass, Task::Multilabel] {
        if let Ok(c) = parse_corpus(corpus, task, &LoadOptions::default()) {
            let _ = c.split_counts();
            let _ = parse_expert(expert, &c);
        }
    }
});
