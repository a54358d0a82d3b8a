//! Wall-time scaling harness for the attention channels.
//!
//! Runs one-layer forward passes on random graphs of doubling size with a
//! fixed average degree (so the edge count doubles with the node count).
//! Measurement protocol: the allocator's mmap threshold is pinned so large
//! tensor buffers recycle through the heap, the cache is swept before every
//! timed pass so every size is measured from the same cold state, and the
//! minimum over repetitions is reported.

use crate::autograd::Tape;
use crate::data::gen_random_edges;
use crate::error::Result;
use crate::model::{DeGTAConfig, DeGTAModel, ModelInputs, Task};

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub n: usize,
    pub edges: usize,
    pub local_ms: f64,
    pub global_ms: f64,
}

fn pin_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 128 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 128 << 20);
    });
}

/// Touches a buffer larger than any cache level.
fn sweep_cache(buf: &mut [u64]) -> u64 {
    let mut acc = 0u64;
    for v in buf.iter_mut() {
        *v = v.wrapping_add(1);
        acc = acc.wrapping_add(*v);
    }
    acc
}

/// Times the local and global channels at `n = min_n, 2 min_n, ... max_n`.
pub fn scaling_bench(
    min_n: usize,
    max_n: usize,
    avg_degree: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    pin_allocator();
    let mut sweep = vec![1u64; 4 * 1024 * 1024];
    let mut sink = 0u64;

    let mut records = Vec::new();
    let mut n = min_n;
    while n <= max_n {
        let g = gen_random_edges(n, avg_degree * n, seed ^ n as u64)?;
        let cfg = DeGTAConfig {
            d: 16,
            d_hidden: 8,
            d_attr_hidden: 16,
            layers: 1,
            ..DeGTAConfig::with_k(8)
        };
        let model = DeGTAModel::new_seeded(
            cfg.clone(),
            g.features().cols(),
            2,
            Task::NodeClassification,
        )?;
        let inputs = ModelInputs::prepare(&g, &cfg)?;

        for _ in 0..2 {
            let tape = Tape::new();
            model.forward(&tape, &g, &inputs, false)?;
        }
        let mut local = u128::MAX;
        let mut global = u128::MAX;
        for _ in 0..reps.max(1) {
            sink ^= sweep_cache(&mut sweep);
            let tape = Tape::new();
            let (pass, _) = model.forward(&tape, &g, &inputs, false)?;
            local = local.min(pass.local_nanos);
            global = global.min(pass.global_nanos);
        }
        records.push(BenchRecord {
            n,
            edges: g.num_edges(),
            local_ms: local as f64 / 1e6,
            global_ms: global as f64 / 1e6,
        });
        n *= 2;
    }
    std::hint::black_box(sink);
    Ok(records)
}

/// Per-doubling growth ratios `(local, global)` between consecutive records.
pub fn growth_ratios(records: &[BenchRecord]) -> Vec<(f64, f64)> {
    records
        .windows(2)
        .map(|w| {
            (
                w[1].local_ms / w[0].local_ms.max(1e-9),
                w[1].global_ms / w[0].global_ms.max(1e-9),
            )
        })
        .collect()
}
