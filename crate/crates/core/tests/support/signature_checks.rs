// SPDX-License-Identifier: MIT OR Apache-2.0

//! Signature and cluster-score properties as plain checks, shared by the
//! property tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegraph_core::coherence::{davies_bouldin, silhouette};
use probegraph_core::graph::NodeId;
use probegraph_core::lexicon::{FunctionalVocabulary, DEFAULT_WINDOW};
use probegraph_core::signatures::{
    aggregate_signature, argmax, compute_record, density, observe, sparsity_ratio, ActivationRecord, BaselineStats,
    Signature,
};

use super::cluster;

pub const POOL: [&str; 8] = [" capital", " of", " Texas", " is", " Austin", ":", " city", " the"];

/// Per probe: token indices into POOL and integer activation levels.
pub type Probe = (Vec<usize>, Vec<u32>);

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($c:expr, $($t:tt)*) => {
        let ok: bool = $c;
        if !ok {
            return Err(format!($($t)*));
        }
    };
}

pub fn random_probes(seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rng.gen_range(1..8))
        .map(|_| {
            let n = rng.gen_range(2..8);
            ((0..n).map(|_| rng.gen_range(0..POOL.len())).collect(), (0..n).map(|_| rng.gen_range(0..20)).collect())
        })
        .collect()
}

pub fn records(ps: &[Probe], scale: f64) -> Vec<ActivationRecord> {
    let seed: Vec<f64> = ps[0].1.iter().map(|&v| f64::from(v) * scale).collect();
    ps.iter()
        .enumerate()
        .map(|(i, (toks, vals))| {
            let tokens: Vec<String> = toks.iter().map(|&t| POOL[t].to_owned()).collect();
            let acts: Vec<f64> = vals.iter().map(|&v| f64::from(v) * scale).collect();
            compute_record(
                NodeId::new("3_7_0"),
                format!("p{i}"),
                &acts,
                &tokens,
                &seed,
                BaselineStats { median: 0.0, mad: 0.0 },
            )
            .unwrap()
        })
        .collect()
}

pub fn signature(recs: &[ActivationRecord]) -> Signature {
    let vocab = FunctionalVocabulary::english();
    let peaks: Vec<_> = recs.iter().map(|r| observe(r, &vocab, DEFAULT_WINDOW).unwrap().0).collect();
    aggregate_signature(3, recs, &peaks).unwrap()
}

pub fn same(a: &Signature, b: &Signature) -> Check {
    ensure!(a.probes.len() == b.probes.len(), "probe count");
    for (pa, pb) in a.probes.iter().zip(&b.probes) {
        ensure!((pa.sparsity - pb.sparsity).abs() < 1e-12, "sparsity {} vs {}", pa.sparsity, pb.sparsity);
        let mut pb = pb.clone();
        pb.sparsity = pa.sparsity;
        ensure!(*pa == pb, "probe {:?} vs {:?}", pa, pb);
    }
    ensure!(a.peak_consistency == b.peak_consistency, "peak_consistency");
    ensure!(a.n_distinct_peaks == b.n_distinct_peaks, "n_distinct_peaks");
    ensure!(a.func_vs_sem == b.func_vs_sem, "func_vs_sem");
    ensure!(a.semantic_conf == b.semantic_conf, "semantic_conf");
    ensure!(a.conf_functional == b.conf_functional, "conf_functional");
    ensure!(a.modal_peak_token == b.modal_peak_token, "modal peak token");
    ensure!(a.modal_target_token == b.modal_target_token, "modal target token");
    ensure!((a.median_sparsity - b.median_sparsity).abs() < 1e-12, "median_sparsity");
    ensure!((a.mean_density - b.mean_density).abs() < 1e-12, "mean_density");
    ensure!((a.mean_cosine_to_seed - b.mean_cosine_to_seed).abs() < 1e-9, "cosine to seed");
    Ok(())
}

pub fn scale_invariance(ps: &[Probe], scale: f64) -> Check {
    same(&signature(&records(ps, 1.0)), &signature(&records(ps, scale)))
}

/// Rotate by `rot`, then reverse.
pub fn permutation_invariance(ps: &[Probe], rot: usize) -> Check {
    let recs = records(ps, 1.0);
    let mut shuffled = recs.clone();
    let k = rot % shuffled.len();
    shuffled.rotate_left(k);
    shuffled.reverse();
    same(&signature(&recs), &signature(&shuffled))
}

pub fn record_ranges(vals: &[f64]) -> Check {
    let s = sparsity_ratio(vals);
    let d = density(vals);
    ensure!((0.0..=1.0).contains(&s), "sparsity {s}");
    ensure!((0.0..1.0).contains(&d), "density {d}");
    let p = argmax(vals);
    ensure!(vals.iter().all(|&v| v <= vals[p]), "peak is not a maximum");
    ensure!(vals[..p].iter().all(|&v| v < vals[p]), "earlier tie not taken");
    Ok(())
}

pub fn edge_cases() -> Check {
    for v in [vec![2.5; 6], vec![0.0; 6], vec![4.0]] {
        ensure!(sparsity_ratio(&v) == 0.0, "sparsity of {v:?}");
        ensure!(density(&v) == 0.0, "density of {v:?}");
        ensure!(argmax(&v) == 0, "peak of {v:?}");
    }
    let v = [1.0, 3.0, 0.5, 3.0, 3.0];
    let toks: Vec<String> = [" a", " b", " c", " d", " e"].iter().map(|s| s.to_string()).collect();
    for _ in 0..5 {
        let r = compute_record(NodeId::new("1_1_0"), "p", &v, &toks, &v, BaselineStats { median: 0.0, mad: 0.0 })
            .map_err(|e| e.to_string())?;
        ensure!(r.peak_position == 1 && r.peak_token == "b", "tie went to {}", r.peak_position);
    }
    Ok(())
}

pub fn cluster_scores(seed: u64) -> Check {
    let (points, labels) = cluster::random_instance(seed);
    let s = silhouette(&points, &labels).map_err(|e| e.to_string())?;
    let d = davies_bouldin(&points, &labels).map_err(|e| e.to_string())?;
    let (bs, bd) = (cluster::silhouette(&points, &labels), cluster::davies_bouldin(&points, &labels));
    ensure!((s - bs).abs() < 1e-12, "silhouette {s} vs {bs} on seed {seed}");
    ensure!((d - bd).abs() < 1e-12, "davies-bouldin {d} vs {bd} on seed {seed}");
    Ok(())
}
