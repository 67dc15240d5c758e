use std::collections::HashMap;

use rayon::prelude::*;

/// Runs `work(i)` for every index. Indices sharing a key run sequentially in
/// index order; distinct keys run in parallel. Results come back in index
/// order.
///
/// Stateful generators (replay cursors, oracle counters) advance per prompt
/// digest, so keying by digest keeps their output independent of scheduling.
pub(crate) fn par_by_key<R, F>(keys: &[String], work: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    let mut slot_of: HashMap<&str, usize> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        let slot = *slot_of.entry(k.as_str()).or_insert_with(|| {
            buckets.push(Vec::new());
            buckets.len() - 1
        });
        buckets[slot].push(i);
    }
    let mut done: Vec<(usize, R)> = buckets
        .par_iter()
        .flat_map_iter(|idxs| idxs.iter().map(|&i| (i, work(i))).collect::<Vec<_>>())
        .collect();
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}
