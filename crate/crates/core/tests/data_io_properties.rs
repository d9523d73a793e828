mod common;

use std::collections::HashSet;

use alignlab::data::{generate_synthetic, load_jsonl, write_jsonl, Split, StyleGrammar};
use alignlab::io::{decode_actd, encode_actd, load_checkpoint, read_actd, save_checkpoint, Tensor};
use alignlab::model::init_params;
use alignlab::Error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_pairs_obey_their_invariants(seed in any::<u64>(), n in 4usize..60) {
        let cfg = common::small_config(0);
        let ds = generate_synthetic(seed, n, &cfg).unwrap();
        let g = StyleGrammar::new(seed, &cfg).unwrap();
        prop_assert_eq!(ds.len(), n);
        for p in ds.pairs() {
            prop_assert!(p.chosen != p.rejected);
            prop_assert!(p.fits(cfg.max_seq_len));
            prop_assert!(g.satisfies(&p.prompt, &p.chosen));
            prop_assert!(!g.satisfies(&p.prompt, &p.rejected));
        }
        let train = ds.iter_split(Split::Train).count();
        let eval = ds.iter_split(Split::Eval).count();
        prop_assert_eq!(train + eval, n);
        prop_assert!(train > 0 && eval > 0);
        let again = generate_synthetic(seed, n, &cfg).unwrap();
        prop_assert_eq!(ds.checksum(), again.checksum());
    }

    #[test]
    fn actd_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5),
        seed in any::<u64>(),
    ) {
        let mut x = seed;
        let tensors: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, dims)| {
                let n: usize = dims.iter().product();
                let data = (0..n)
                    .map(|_| {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        f64::from_bits(x >> 2)
                    })
                    .collect();
                Tensor::new(format!("t{i}.ü"), dims.clone(), data).unwrap()
            })
            .collect();
        let bytes = encode_actd(&tensors).unwrap();
        let back = decode_actd(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (a, b) in back.iter().zip(&tensors) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.dims, &b.dims);
            prop_assert!(a.data.iter().zip(&b.data).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        for cut in [bytes.len().saturating_sub(1), bytes.len() / 2, 3] {
            if cut < bytes.len() {
                prop_assert!(decode_actd(&bytes[..cut]).is_err());
            }
        }
    }
}

#[test]
fn actd_layout_is_little_endian() {
    let t = Tensor::new("w", vec![2], vec![1.0, -2.5]).unwrap();
    let bytes = encode_actd(&[t]).unwrap();
    let mut expect = b"ACTD".to_vec();
    expect.extend(1u16.to_le_bytes());
    expect.extend(1u32.to_le_bytes());
    expect.extend(1u32.to_le_bytes());
    expect.extend(b"w");
    expect.extend(1u32.to_le_bytes());
    expect.extend(2u64.to_le_bytes());
    expect.extend(1.0f64.to_le_bytes());
    expect.extend((-2.5f64).to_le_bytes());
    assert_eq!(bytes, expect);
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let p = init_params(&common::small_config(9)).unwrap();
    let (actd, json) = save_checkpoint(&p, dir.path(), "base", serde_json::json!({"steps": 0})).unwrap();
    let (back, manifest) = load_checkpoint(&json).unwrap();
    assert_eq!(back.flat(), p.flat());
    assert_eq!(manifest.checksum, p.checksum());
    assert_eq!(read_actd(&actd).unwrap().len(), p.tensor_specs().len());

    let mut bytes = std::fs::read(&actd).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&actd, &bytes).unwrap();
    assert!(load_checkpoint(&json).is_err());

    std::fs::remove_file(&actd).unwrap();
    assert!(matches!(load_checkpoint(&json), Err(Error::Missing { .. })));
}

#[test]
fn jsonl_round_trip_is_token_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config(0);
    let ds = generate_synthetic(12, 30, &cfg).unwrap();
    let path = dir.path().join("pairs.jsonl");
    write_jsonl(&ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 30);
    let back = load_jsonl(&path, &cfg, 12).unwrap();
    assert_eq!(back.pairs(), ds.pairs());
    let ids: HashSet<_> = back.pairs().iter().collect();
    assert_eq!(ids.len(), 30);
}
