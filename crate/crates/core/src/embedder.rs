//! Per-document embedding tensors and last-`p`-layer concatenation.

use std::collections::BTreeMap;

use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunker::ChunkSet;
use crate::encoder::{ChunkEncoder, ChunkProbe};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::store::{EmbeddingRecord, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerCombine {
    Concat,
    /// Element-wise sum of the last `p` layers (ablation).
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbedding {
    pub doc_id: String,
    /// `N x l x d`.
    pub layers: Array3<f64>,
    pub probes: Vec<Vec<f64>>,
}

impl DocEmbedding {
    pub fn num_chunks(&self) -> usize {
        self.layers.dim().0
    }

    pub fn rows(&self, p: usize, combine: LayerCombine) -> Result<Mat> {
        match combine {
            LayerCombine::Concat => concat_layers(&self.layers, p),
            LayerCombine::Sum => sum_layers(&self.layers, p),
        }
    }
}

/// Encodes every chunk of a document, in chunk order.
pub fn extract_document(chunk_set: &ChunkSet, encoder: &dyn ChunkEncoder) -> Result<DocEmbedding> {
    let outputs: Vec<_> = chunk_set
        .chunks
        .par_iter()
        .map(|c| {
            if c.doc_id != chunk_set.doc_id {
                return Err(Error::validation(format!(
                    "chunk of {:?} in the chunk set of {:?}",
                    c.doc_id, chunk_set.doc_id
                )));
            }
            encoder.encode_and_classify(c)
        })
        .collect::<Result<_>>()?;
    let (l, d) = (encoder.layers(), encoder.dim());
    let mut layers = Array3::zeros((outputs.len(), l, d));
    let mut probes = Vec::with_capacity(outputs.len());
    for (i, (emb, ChunkProbe { probs })) in outputs.into_iter().enumerate() {
        if emb.matrix.dim() != (l, d) || emb.matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "chunk {i} of {:?}: embedding has shape {:?} or non-finite entries",
                chunk_set.doc_id,
                emb.matrix.dim()
            )));
        }
        layers.slice_mut(s![i, .., ..]).assign(&emb.matrix);
        probes.push(probs);
    }
    Ok(DocEmbedding {
        doc_id: chunk_set.doc_id.clone(),
        layers,
        probes,
    })
}

fn check_p(e: &Array3<f64>, p: usize) -> Result<()> {
    let l = e.dim().1;
    if p == 0 || p > l {
        return Err(Error::config(format!("p = {p} must lie in 1..={l}")));
    }
    Ok(())
}

/// Row `i` is `[E_i^(l) | E_i^(l-1) | .. | E_i^(l-p+1)]`.
pub fn concat_layers(e: &Array3<f64>, p: usize) -> Result<Mat> {
    check_p(e, p)?;
    let (n, l, d) = e.dim();
    let mut out = Mat::zeros((n, p * d));
    for k in 0..p {
        out.slice_mut(s![.., k * d..(k + 1) * d]).assign(&e.slice(s![.., l - 1 - k, ..]));
    }
    Ok(out)
}

pub fn sum_layers(e: &Array3<f64>, p: usize) -> Result<Mat> {
    check_p(e, p)?;
    let l = e.dim().1;
    Ok(e.slice(s![.., l - p.., ..]).sum_axis(ndarray::Axis(1)))
}

/// Appends a document's chunks to a store (f32 on disk).
pub fn push_to_store(store: &mut EmbeddingStore, doc: &DocEmbedding) -> Result<()> {
    for i in 0..doc.num_chunks() {
        store.push(EmbeddingRecord {
            doc_id: doc.doc_id.clone(),
            chunk_index: i as u32,
            embeddings: doc.layers.slice(s![i, .., ..]).iter().map(|&x| x as f32).collect(),
            probe: doc.probes[i].iter().map(|&x| x as f32).collect(),
        })?;
    }
    Ok(())
}

/// Groups store records by document. Chunk indices must run `0..N` in order.
pub fn documents_from_store(store: &EmbeddingStore) -> Result<BTreeMap<String, DocEmbedding>> {
    let (l, d) = (store.layers as usize, store.dim as usize);
    let mut grouped: BTreeMap<String, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in &store.records {
        grouped.entry(r.doc_id.clone()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (doc_id, mut recs) in grouped {
        recs.sort_by_key(|r| r.chunk_index);
        for (i, r) in recs.iter().enumerate() {
            if r.chunk_index as usize != i {
                return Err(Error::format(format!("{doc_id}: chunk indices are not contiguous from 0")));
            }
        }
        let mut layers = Array3::zeros((recs.len(), l, d));
        for (i, r) in recs.iter().enumerate() {
            for (k, &x) in r.embeddings.iter().enumerate() {
                layers[[i, k / d, k % d]] = f64::from(x);
            }
        }
        let probes = recs.iter().map(|r| r.probe.iter().map(|&x| f64::from(x)).collect()).collect();
        out.insert(
            doc_id.clone(),
            DocEmbedding {
                doc_id,
                layers,
                probes,
            },
        );
    }
    Ok(out)
}
