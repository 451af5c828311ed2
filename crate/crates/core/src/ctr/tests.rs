use super::*;
use crate::eval::auc;
use crate::numeric::{AdamW, ParamGroup};
use crate::rng::stream;
use crate::testutil::{random_probe, store_gradcheck};
use rand::Rng;

fn cfg(backbone: Backbone, d: usize, layers: usize, hidden: usize) -> CtrConfig {
    CtrConfig {
        backbone,
        embed_dim: d,
        layers,
        hidden,
        attention_size: 4,
        ..CtrConfig::default()
    }
}

fn build(c: &CtrConfig, cards: &[usize]) -> (ParamStore, CtrModel) {
    let mut store = ParamStore::new();
    let m = CtrModel::new(&mut store, c, cards, &mut stream(1, "test/ctr")).unwrap();
    (store, m)
}

fn ids(v: &[usize]) -> IdFeatures {
    IdFeatures { indices: v.to_vec() }
}

fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    let id = store.find(name).unwrap_or_else(|| panic!("no {name}"));
    let shape = store.value(id).shape().to_vec();
    *store.value_mut(id) = Tensor::new(shape, data).unwrap();
}

fn zero_all(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn embed_zero_and_oracle_rows() {
    let c = cfg(Backbone::Dnn, 3, 1, 4);
    let (mut store, m) = build(&c, &[4, 5]);
    let batch = [ids(&[1, 3]), ids(&[0, 4])];
    let mut g = Graph::new();
    let e = m.embed(&mut g, &store, &batch).unwrap();
    assert_eq!(g.shape(e), &[2, 2, 3]);
    for (b, x) in batch.iter().enumerate() {
        for j in 0..2 {
            let table = store.value(store.find(&format!("ctr.embedding.{j}")).unwrap());
            for k in 0..3 {
                assert_eq!(g.value(e).at(&[b, j, k]), table.at(&[x.indices[j], k]));
            }
        }
    }
    zero_all(&mut store);
    let mut g = Graph::new();
    let e = m.embed(&mut g, &store, &batch).unwrap();
    assert!(g.value(e).data().iter().all(|&x| x == 0.0));
}

#[test]
fn embed_gradient_only_on_looked_up_rows() {
    let (store, m) = build(&cfg(Backbone::Dnn, 3, 1, 4), &[4, 5]);
    let mut g = Graph::new();
    let e = m.embed(&mut g, &store, &[ids(&[2, 1])]).unwrap();
    let loss = g.sum(e);
    let grads = g.backward(loss).unwrap();
    let mut s = store.clone();
    s.accumulate(&g, &grads);
    let t0 = s.get(s.find("ctr.embedding.0").unwrap()).grad.clone().unwrap();
    for r in 0..4 {
        let expect = if r == 2 { 1.0 } else { 0.0 };
        assert!(t0.row(r).iter().all(|&x| x == expect));
    }
    assert!(m.embed(&mut Graph::new(), &store, &[ids(&[4, 0])]).is_err());
}

#[test]
fn dnn_zero_input_and_relu_identity() {
    let c = cfg(Backbone::Dnn, 1, 1, 2);
    let (mut store, m) = build(&c, &[3, 3]);
    zero_all(&mut store);
    let mut g = Graph::new();
    let q = m.represent(&mut g, &store, &[ids(&[0, 1])]).unwrap();
    assert!(g.value(q).data().iter().all(|&x| x == 0.0));

    set(&mut store, "ctr.embedding.0", vec![1.5, -2.0, 0.0]);
    set(&mut store, "ctr.embedding.1", vec![-0.5, 0.25, 3.0]);
    set(&mut store, "ctr.deep.0.w", vec![1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let q = m.represent(&mut g, &store, &[ids(&[0, 0]), ids(&[1, 1])]).unwrap();
    assert_eq!(g.value(q).data(), &[1.5, 0.0, 0.0, 0.25]);
}

#[test]
fn dcn_zero_cross_is_identity_and_hand_example() {
    let c = CtrConfig {
        dcn_deep_only: false,
        ..cfg(Backbone::Dcnv2, 1, 1, 3)
    };
    let (mut store, m) = build(&c, &[2, 2]);
    assert_eq!(m.q_dim(), 2 + 3);
    set(&mut store, "ctr.embedding.0", vec![1.0, 0.3]);
    set(&mut store, "ctr.embedding.1", vec![1.0, -0.7]);
    set(&mut store, "ctr.cross.0.w", vec![0.0; 4]);
    let mut g = Graph::new();
    let q = m.represent(&mut g, &store, &[ids(&[1, 1])]).unwrap();
    assert_eq!(&g.value(q).data()[..2], &[0.3, -0.7]);

    set(&mut store, "ctr.cross.0.w", vec![1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let q = m.represent(&mut g, &store, &[ids(&[0, 0])]).unwrap();
    assert_eq!(&g.value(q).data()[..2], &[2.0, 2.0]);
}

#[test]
fn autoint_singleton_and_identity_residual() {
    let c = CtrConfig {
        attention_size: 2,
        ..cfg(Backbone::Autoint, 2, 1, 8)
    };
    let (mut store, m) = build(&c, &[3]);
    set(&mut store, "ctr.embedding.0", vec![1.0, -2.0, 0.5, 0.5, -1.0, 3.0]);
    set(&mut store, "ctr.autoint.0.wq", vec![0.0; 4]);
    set(&mut store, "ctr.autoint.0.wk", vec![0.0; 4]);
    set(&mut store, "ctr.autoint.0.wv", vec![0.0; 4]);
    set(&mut store, "ctr.autoint.0.wres", vec![1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let q = m.represent(&mut g, &store, &[ids(&[0]), ids(&[2])]).unwrap();
    assert_eq!(g.value(q).data(), &[1.0, 0.0, 0.0, 3.0]);

    // F=1: the only attention weight is 1, so output = relu(res + value).
    let (store, m) = build(&c, &[3]);
    let mut g = Graph::new();
    let q = m.represent(&mut g, &store, &[ids(&[1])]).unwrap();
    let e = store.value(store.find("ctr.embedding.0").unwrap()).row(1).to_vec();
    let mat = |n: &str| store.value(store.find(n).unwrap()).clone();
    let (wv, wr) = (mat("ctr.autoint.0.wv"), mat("ctr.autoint.0.wres"));
    for k in 0..2 {
        let pre: f64 = (0..2).map(|i| e[i] * (wv.at(&[i, k]) + wr.at(&[i, k]))).sum();
        assert!((g.value(q).data()[k] - pre.max(0.0)).abs() < 1e-14);
    }
}

#[test]
fn autoint_attention_rows_sum_to_one() {
    let c = cfg(Backbone::Autoint, 4, 2, 8);
    let (store, m) = build(&c, &[5, 5, 5]);
    let mut g = Graph::new();
    m.represent(&mut g, &store, &[ids(&[1, 2, 3]), ids(&[4, 0, 2])]).unwrap();
    // softmax nodes are the only [B, F, F] tensors whose rows sum to 1;
    // check every one of them.
    let mut found = 0;
    for i in 0..g.len() {
        let t = g.value(Var::from_index(i));
        if t.shape() == [2, 3, 3] {
            for row in t.data().chunks(3) {
                if row.iter().all(|&x| x >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12 {
                    found += 1;
                }
            }
        }
    }
    assert!(found >= 2 * 3 * 2);
}

fn fm_pair(store: &ParamStore, m: &CtrModel, x: &IdFeatures) -> f64 {
    let mut g = Graph::new();
    let q = m.represent(&mut g, store, std::slice::from_ref(x)).unwrap();
    g.value(q).data()[0]
}

#[test]
fn fm_pairwise_examples_and_oracle() {
    let c = cfg(Backbone::Fm, 2, 0, 1);
    let (mut store, m) = build(&c, &[2, 2]);
    assert_eq!(m.q_dim(), 1);
    set(&mut store, "ctr.embedding.0", vec![1.0, 0.0, 1.0, 0.0]);
    set(&mut store, "ctr.embedding.1", vec![0.0, 1.0, 1.0, 0.0]);
    assert_eq!(fm_pair(&store, &m, &ids(&[0, 0])), 0.0);
    assert_eq!(fm_pair(&store, &m, &ids(&[1, 1])), 1.0);

    let c = cfg(Backbone::Fm, 5, 0, 1);
    let (mut store, m) = build(&c, &[3; 6]);
    let mut rng = stream(3, "test/fm");
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    }
    let x = ids(&[0, 1, 2, 0, 1, 2]);
    let v: Vec<Vec<f64>> = (0..6)
        .map(|j| store.value(store.find(&format!("ctr.embedding.{j}")).unwrap()).row(x.indices[j]).to_vec())
        .collect();
    let mut oracle = 0.0;
    for a in 0..6 {
        for b in a + 1..6 {
            oracle += v[a].iter().zip(&v[b]).map(|(p, q)| p * q).sum::<f64>();
        }
        oracle += store.value(store.find(&format!("ctr.fm.first_order.{a}")).unwrap()).data()[x.indices[a]];
    }
    assert!((fm_pair(&store, &m, &x) - oracle).abs() < 1e-10);
}

#[test]
fn prediction_head_examples() {
    let c = cfg(Backbone::Dnn, 1, 0, 1);
    let (mut store, m) = build(&c, &[2]);
    assert_eq!(m.q_dim(), 1);
    zero_all(&mut store);
    let mut g = Graph::new();
    let (_, logit) = m.forward(&mut g, &store, &[ids(&[0])]).unwrap();
    assert_eq!(g.value(logit).data(), &[0.0]);
    let p = g.sigmoid(logit).unwrap();
    assert_eq!(g.value(p).data(), &[0.5]);

    set(&mut store, "ctr.embedding.0", vec![1.0, 0.0]);
    set(&mut store, "ctr.head.w", vec![2.0]);
    set(&mut store, "ctr.head.b", vec![-1.0]);
    let mut g = Graph::new();
    let (_, logit) = m.forward(&mut g, &store, &[ids(&[0])]).unwrap();
    assert_eq!(g.value(logit).data(), &[1.0]);
}

#[test]
fn every_backbone_passes_gradient_check() {
    for backbone in [Backbone::Dnn, Backbone::Dcnv2, Backbone::Autoint, Backbone::Fm] {
        let c = CtrConfig {
            embed_std: 0.5,
            ..cfg(backbone, 3, 2, 5)
        };
        let (mut store, m) = build(&c, &[4, 3, 5]);
        let mut rng = stream(5, "test/ctr-grad");
        // move first-order weights and biases off zero
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
        }
        let batch = vec![ids(&[0, 1, 2]), ids(&[3, 2, 4]), ids(&[1, 1, 0])];
        let labels = vec![1.0, 0.0, 1.0];
        let all: Vec<ParamId> = store.ids().collect();
        let probe = random_probe(&store, &all, 40, &mut rng);
        let err = store_gradcheck(
            &store,
            &probe,
            |g, s| {
                let (_, logit) = m.forward(g, s, &batch).unwrap();
                let p = g.sigmoid(logit).unwrap();
                g.bce_loss(p, &labels).unwrap()
            },
            1e-6,
        );
        assert!(err < 1e-4, "{backbone}: {err}");
    }
}

#[test]
fn forward_is_deterministic() {
    let (store, m) = build(&cfg(Backbone::Dcnv2, 4, 2, 8), &[5, 5]);
    let run = || {
        let mut g = Graph::new();
        let (_, l) = m.forward(&mut g, &store, &[ids(&[1, 2]), ids(&[3, 4])]).unwrap();
        g.value(l).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_backbone_fits_separable_toy_data() {
    // label = 1 iff field-0 value is even; separable from one field.
    let mut rng = stream(11, "test/ctr-smoke");
    let data: Vec<(IdFeatures, u8)> = (0..256)
        .map(|_| {
            let a = rng.gen_range(0..10);
            let b = rng.gen_range(0..10);
            (ids(&[a, b]), u8::from(a % 2 == 0))
        })
        .collect();
    for backbone in [Backbone::Dnn, Backbone::Dcnv2, Backbone::Autoint, Backbone::Fm] {
        let c = CtrConfig {
            embed_dim: 8,
            layers: 2,
            hidden: 32,
            attention_size: 8,
            backbone,
            ..CtrConfig::default()
        };
        let (mut store, m) = build(&c, &[11, 11]);
        let groups = [ParamGroup::new(store.ids().collect(), 1e-2)];
        let opt = AdamW::default();
        for step in 0..200 {
            let batch: Vec<_> = data.iter().skip((step * 32) % 256).take(32).collect();
            let x: Vec<IdFeatures> = batch.iter().map(|d| d.0.clone()).collect();
            let y: Vec<f64> = batch.iter().map(|d| d.1 as f64).collect();
            let mut g = Graph::new();
            let (_, logit) = m.forward(&mut g, &store, &x).unwrap();
            let p = g.sigmoid(logit).unwrap();
            let loss = g.bce_loss(p, &y).unwrap();
            let grads = g.backward(loss).unwrap();
            store.accumulate(&g, &grads);
            opt.step(&mut store, &groups).unwrap();
        }
        let x: Vec<IdFeatures> = data.iter().map(|d| d.0.clone()).collect();
        let y: Vec<u8> = data.iter().map(|d| d.1).collect();
        let mut g = Graph::new();
        let (_, logit) = m.forward(&mut g, &store, &x).unwrap();
        let a = auc(g.value(logit).data(), &y).unwrap();
        assert!(a > 0.95, "{backbone}: train AUC {a}");
    }
}
