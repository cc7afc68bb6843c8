use std::fs::File;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xkv_core::{prune_step, snapshot, KVCacheLayer, MultiHeadTensor, StreamConfig};

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, t: usize, c: usize) -> MultiHeadTensor {
    let data = (0..h * t * c).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    MultiHeadTensor::new(h, t, c, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// After every step the cache is within budget, keeps the whole first and
    /// current frames, and stays in frame order.
    #[test]
    fn pruned_cache_respects_budget(
        seed in any::<u64>(),
        heads in 1usize..3,
        d_head in 1usize..6,
        registers in 0usize..3,
        patches in 1usize..9,
        pooling in 1usize..5,
        extra in 0usize..20,
        quantize in any::<bool>(),
    ) {
        let per = 1 + registers + patches;
        let config = StreamConfig { registers, patches, pooling, budget: 2 * per + extra, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = KVCacheLayer::new(heads, d_head, config.budget);
        let first = random_tensor(&mut rng, heads, per, d_head);
        for f in 0..8usize {
            let k = if f == 0 { first.clone() } else { random_tensor(&mut rng, heads, per, d_head) };
            let v = random_tensor(&mut rng, heads, per, d_head);
            let q = random_tensor(&mut rng, heads, per, d_head);
            layer.append(&k, &v, f).unwrap();
            prune_step(&mut layer, &q, &config).unwrap();
            if quantize {
                layer.quantize(4, 3).unwrap();
            }

            let total = layer.total_tokens();
            prop_assert_eq!(total, ((f + 1) * per).min(config.budget));
            let frames = layer.token_frames();
            prop_assert!(frames.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(frames.iter().filter(|&&x| x == 0).count(), per);
            prop_assert_eq!(frames.iter().filter(|&&x| x == f as u32).count(), per);
            if !quantize {
                let (keys, _) = layer.read_full_precision().unwrap();
                prop_assert_eq!(keys.token_range(0, per), first.clone());
                prop_assert_eq!(keys.token_range(total - per, total), k);
            }
        }
    }
}

#[test]
fn snapshot_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    for quantized in [false, true] {
        let mut layer = KVCacheLayer::new(2, 4, 40);
        for f in 0..3 {
            let (k, v) = (random_tensor(&mut rng, 2, 9, 4), random_tensor(&mut rng, 2, 9, 4));
            layer.append(&k, &v, f).unwrap();
        }
        if quantized {
            layer.quantize(2, 8).unwrap();
        }
        let path = dir.path().join(format!("layer-{quantized}.xkv"));
        snapshot::write(&layer, File::create(&path).unwrap()).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, layer.memory_bytes());
        let back = snapshot::read(File::open(&path).unwrap()).unwrap();
        assert_eq!(back, layer);
    }
}

#[test]
fn config_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("c.toml");
    let json = dir.path().join("c.json");
    std::fs::write(&toml, "budget = 300\nbits = 2\n").unwrap();
    std::fs::write(&json, r#"{"budget": 300, "bits": 2}"#).unwrap();
    let a = StreamConfig::load(&toml).unwrap();
    assert_eq!(a, StreamConfig::load(&json).unwrap());
    assert_eq!((a.budget, a.bits, a.pooling), (300, 2, 16));
    assert!(StreamConfig::load(&dir.path().join("missing.toml")).is_err());
}
