#![no_main]

use libfuzzer_sys::fuzz_target;
use mesc::chunker::{assign_sentences, chunk};
use mesc::corpus::split_sentences;
use mesc::tokenizer::tokenize;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let spans = split_sentences(text);
    for s in &spans {
        let _ = s.text(text);
    }
    let tokens = tokenize(text, 4096);
    if let Ok(set) = chunk("doc", &tokens, 16, 4) {
        let ids: Vec<u32> = tokens.iter().map(|t| t.id).collect();
        assert_eq!(set.deoverlapped(), ids);
        let _ = assign_sentences(&set, &tokens, &spans);
    }
});
