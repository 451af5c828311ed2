use super::*;
use crate::ctr::CtrConfig;
use crate::data::{generate_synthetic, SynthConfig};
use crate::pipeline::Prepared;
use crate::plm::EncoderConfig;

fn prepared() -> Prepared {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 200,
        n_users: 20,
        n_items: 30,
        ..SynthConfig::default()
    })
    .unwrap();
    Prepared::new(&ds.fields, &ds.samples, 40, 1, 1000).unwrap()
}

fn arch(p: &Prepared, k: usize) -> Architecture {
    Architecture {
        ctr: CtrConfig {
            embed_dim: 4,
            layers: 1,
            hidden: 8,
            ..CtrConfig::default()
        },
        encoder: EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ff: 16,
            z_max: 40,
            k,
            ..EncoderConfig::default()
        },
        layerwise: true,
        cardinalities: p.schema.cardinalities(),
        vocab_size: p.vocab.len(),
    }
}

fn checkpoint(p: &Prepared, parts: Parts, k: usize) -> Checkpoint {
    let mut model = Model::new(&arch(p, k), parts, 3, "init/ctr").unwrap();
    // Non-trivial optimizer state.
    for id in model.store.ids().collect::<Vec<_>>() {
        let prm = model.store.get_mut(id);
        prm.step = 7;
        prm.m = prm.value.map(|x| 0.5 * x);
        prm.v = prm.value.map(|x| x * x);
    }
    Checkpoint {
        model,
        schema: p.schema.clone(),
        vocab: p.vocab.clone(),
        meta: CheckpointMeta {
            mode: "ft-with-plm".into(),
            step: 12,
            val_auc: Some(0.625),
            alpha: Some(0.5),
            no_prompt: false,
            seed: 3,
        },
    }
}

fn kind(e: Error) -> Kind {
    match e {
        Error::Checkpoint { kind, .. } => kind,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn save_load_save_is_byte_identical_and_forward_identical() {
    let p = prepared();
    for parts in [Parts::Ctr, Parts::Pretrain, Parts::Fused] {
        let ck = checkpoint(&p, parts, 3);
        for opt in [false, true] {
            let bytes = ck.to_bytes(opt).unwrap();
            let back = Checkpoint::from_bytes(&bytes, Some(&ck.model.arch)).unwrap();
            assert_eq!(back.model.parts(), parts);
            assert_eq!(back.to_bytes(opt).unwrap(), bytes);
            assert_eq!(named_values(&back.model.store), named_values(&ck.model.store));
            assert_eq!(back.meta, ck.meta);
            assert_eq!(back.schema, ck.schema);
            assert_eq!(back.vocab, ck.vocab);
            if opt {
                for id in back.model.store.ids_by_name() {
                    let a = back.model.store.get(id);
                    let b = ck.model.store.get(ck.model.store.find(&a.name).unwrap());
                    assert_eq!(a.step, b.step);
                    assert_eq!(a.m, b.m);
                    assert_eq!(a.v, b.v);
                }
            }
            if parts != Parts::Pretrain {
                let probe = p.test.subset(&(0..8).collect::<Vec<_>>());
                let x = ck.model.predict(&probe, 4).unwrap();
                let y = back.model.predict(&probe, 4).unwrap();
                assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn records_are_sorted_by_name() {
    let p = prepared();
    let ck = checkpoint(&p, Parts::Fused, 2);
    let names: Vec<String> = named_values(&ck.model.store).into_iter().map(|(n, _)| n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    let back = Checkpoint::from_bytes(&ck.to_bytes(false).unwrap(), None).unwrap();
    assert_eq!(named_values(&back.model.store).len(), names.len());
}

#[test]
fn every_truncation_is_an_error_not_a_panic() {
    let p = prepared();
    let bytes = checkpoint(&p, Parts::Fused, 2).to_bytes(true).unwrap();
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        let k = kind(Checkpoint::from_bytes(&bytes[..cut], None).unwrap_err());
        let want: &[Kind] = match cut {
            0..=3 => &[Kind::Magic],
            4..=7 => &[Kind::Version],
            _ => &[Kind::Parse],
        };
        assert!(want.contains(&k), "cut {cut}: {k}");
    }
}

#[test]
fn distinct_errors_for_magic_version_fingerprint_and_shape() {
    let p = prepared();
    let ck = checkpoint(&p, Parts::Fused, 2);
    let bytes = ck.to_bytes(false).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(kind(Checkpoint::from_bytes(&bad, None).unwrap_err()), Kind::Magic);

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(kind(Checkpoint::from_bytes(&bad, None).unwrap_err()), Kind::Version);

    let mut bad = bytes.clone();
    bad[8] ^= 1;
    assert_eq!(kind(Checkpoint::from_bytes(&bad, None).unwrap_err()), Kind::Fingerprint);

    let other = arch(&p, 5);
    let err = Checkpoint::from_bytes(&bytes, Some(&other)).unwrap_err();
    assert!(err.to_string().contains("`k`"), "{err}");
    assert_eq!(kind(err), Kind::Fingerprint);

    let mut bad = bytes.clone();
    bad.push(0);
    assert_eq!(kind(Checkpoint::from_bytes(&bad, None).unwrap_err()), Kind::Parse);
}

#[test]
fn shape_and_missing_records_are_reported() {
    let p = prepared();
    let ck = checkpoint(&p, Parts::Ctr, 2);
    let bytes = ck.to_bytes(false).unwrap();
    // Rewrite the first dimension of the first record.
    let name = named_values(&ck.model.store)[0].0.clone();
    let at = bytes
        .windows(name.len())
        .position(|w| w == name.as_bytes())
        .unwrap()
        + name.len();
    let dim_at = at + 1 + 4;
    let mut bad = bytes.clone();
    let d = u64::from_le_bytes(bad[dim_at..dim_at + 8].try_into().unwrap());
    // Swap dims so the element count is kept but the shape differs.
    let rank = u32::from_le_bytes(bad[at + 1..at + 5].try_into().unwrap());
    if rank == 2 {
        let d2 = u64::from_le_bytes(bad[dim_at + 8..dim_at + 16].try_into().unwrap());
        if d != d2 {
            bad[dim_at..dim_at + 8].copy_from_slice(&d2.to_le_bytes());
            bad[dim_at + 8..dim_at + 16].copy_from_slice(&d.to_le_bytes());
            assert_eq!(kind(Checkpoint::from_bytes(&bad, None).unwrap_err()), Kind::Shape);
        }
    }

    // A fused checkpoint without its alpha record reads as a pretrain model
    // with an extra head, which is reported as missing/unexpected.
    let mut ck2 = checkpoint(&p, Parts::Fused, 2);
    let mut store = ParamStore::new();
    for id in ck2.model.store.ids_by_name() {
        let name = ck2.model.store.name(id);
        if name != ALPHA_NAME && !name.starts_with(crate::ctr::PREFIX) {
            store.add(name, ck2.model.store.value(id).clone()).unwrap();
        }
    }
    ck2.model.store = store;
    let err = Checkpoint::from_bytes(&ck2.to_bytes(false).unwrap(), None).unwrap_err();
    assert_eq!(kind(err), Kind::Missing);
}
