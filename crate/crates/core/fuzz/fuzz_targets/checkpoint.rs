#![no_main]

use libfuzzer_sys::fuzz_target;
use mesc::encoder::{ToyEncoder, ENCODER_MAGIC};
use mesc::head::{Head, HEAD_MAGIC};
use mesc::store::Checkpoint;
use mesc::structurer::{ClusterModel, CLUSTER_MAGIC};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data, HEAD_MAGIC) {
        let _ = Head::from_checkpoint(&ck);
    }
    if let Ok(ck) = Checkpoint::from_bytes(data, ENCODER_MAGIC) {
        let _ = ToyEncoder::from_checkpoint(&ck);
    }
    if let Ok(ck) = Checkpoint::from_bytes(data, CLUSTER_MAGIC) {
        let _ = ClusterModel::from_checkpoint(&ck);
    }
});
