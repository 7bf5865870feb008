//! Mini-batch triple sampling with uniform rejection negatives.

use crate::error::{DreamError, Result};
use crate::ingest::Interaction;
use crate::objectives::BatchTriples;
use rand::Rng;

const MAX_NEG_RETRIES: usize = 256;
const MAX_EDGE_RETRIES: usize = 64;

/// Per-user training item sets, precomputed for O(log n) negative checks.
pub struct TrainIndex {
    /// Sorted training items per user.
    pub items_by_user: Vec<Vec<u32>>,
    pub num_items: usize,
    pub edges: Vec<Interaction>,
}

impl TrainIndex {
    pub fn new(train: &[Interaction], num_users: usize, num_items: usize) -> Self {
        let mut items_by_user = vec![Vec::new(); num_users];
        for e in train {
            items_by_user[e.user as usize].push(e.item);
        }
        for v in &mut items_by_user {
            v.sort_unstable();
        }
        TrainIndex {
            items_by_user,
            num_items,
            edges: train.to_vec(),
        }
    }

    pub fn interacted(&self, user: u32, item: u32) -> bool {
        self.items_by_user[user as usize].binary_search(&item).is_ok()
    }
}

/// Draw `batch_size` (user, positive, negative) triples: the (user, positive)
/// pair is uniform over training interactions, the negative uniform over the
/// sampled user's non-interacted items via rejection. A user interacting with
/// every item forces a resample of a different interaction; if no negative
/// can be found at all the batch errors out.
pub fn sample_batch<R: Rng>(
    index: &TrainIndex,
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchTriples> {
    if index.edges.is_empty() {
        return Err(DreamError::EmptyDataset("no training interactions".into()));
    }
    let mut users = Vec::with_capacity(batch_size);
    let mut pos_items = Vec::with_capacity(batch_size);
    let mut neg_items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut found = None;
        'edge: for _ in 0..MAX_EDGE_RETRIES {
            let e = index.edges[rng.random_range(0..index.edges.len())];
            if index.items_by_user[e.user as usize].len() >= index.num_items {
                continue; // user saw everything, pick another interaction
            }
            for _ in 0..MAX_NEG_RETRIES {
                let cand = rng.random_range(0..index.num_items as u32);
                if !index.interacted(e.user, cand) {
                    found = Some((e.user, e.item, cand));
                    break 'edge;
                }
            }
        }
        match found {
            Some((u, p, n)) => {
                users.push(u);
                pos_items.push(p);
                neg_items.push(n);
            }
            None => {
                return Err(DreamError::DegenerateBatch(
                    "could not sample a negative item within the retry budget".into(),
                ))
            }
        }
    }
    Ok(BatchTriples {
        users,
        pos_items,
        neg_items,
    })
}

/// [`sample_batch`] with a fresh seeded generator; for one-off batches.
pub fn sample_batch_seeded(
    index: &TrainIndex,
    batch_size: usize,
    seed: u64,
) -> Result<BatchTriples> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    sample_batch(index, batch_size, &mut rng)
}
