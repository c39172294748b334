use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment, AugmentFlags, Dataset, EncodedBatch};
use crate::error::Result;
use crate::scalar::Scalar;

/// Splits `0..n` into batches, shuffled when a seed is given. The last batch
/// may be short.
pub fn batch_plan(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Encoded batches produced on a worker thread and handed over through a
/// bounded queue, so at most `capacity` batches are buffered ahead of the
/// consumer. Batches arrive in plan order.
pub struct BatchStream<S> {
    rx: Option<Receiver<Result<EncodedBatch<S>>>>,
    worker: Option<JoinHandle<()>>,
}

impl<S: Scalar> BatchStream<S> {
    pub fn spawn(
        data: Arc<Dataset<S>>,
        plan: Vec<Vec<usize>>,
        timesteps: usize,
        aug: AugmentFlags,
        seed: u64,
        capacity: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let worker = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for idx in plan {
                let batch = data.gather(&idx).and_then(|(mut x, y)| {
                    augment(&mut x, aug, &mut rng);
                    EncodedBatch::direct(&x, y, timesteps)
                });
                if tx.send(batch).is_err() {
                    return;
                }
            }
        });
        BatchStream {
            rx: Some(rx),
            worker: Some(worker),
        }
    }
}

impl<S> Iterator for BatchStream<S> {
    type Item = Result<EncodedBatch<S>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<S> Drop for BatchStream<S> {
    fn drop(&mut self) {
        // Closing the receiver unblocks a producer waiting on a full queue.
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
