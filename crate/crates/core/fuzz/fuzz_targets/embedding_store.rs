#![no_main]

use libfuzzer_sys::fuzz_target;
use mesc::embedder::documents_from_store;
use mesc::store::EmbeddingStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = EmbeddingStore::from_bytes(data) {
        let _ = documents_from_store(&store);
        let bytes = store.to_bytes();
        let again = EmbeddingStore::from_bytes(&bytes).expect("re-encoded store decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
