//! All ranks inside one process, linked by bounded channels.

use crossbeam_channel::bounded;

use super::Endpoint;

const QUEUE_ENVELOPES: usize = 4096;

/// `n` fully connected endpoints; endpoint `i` is rank `i`.
pub fn mesh(n: usize, batch_bytes: usize) -> Vec<Endpoint> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| bounded(QUEUE_ENVELOPES)).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(r, rx)| Endpoint::from_parts(r as u32, txs.clone(), rx, batch_bytes))
        .collect()
}
