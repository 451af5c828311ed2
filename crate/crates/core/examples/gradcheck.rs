//! Checks reverse-mode gradients of the fused model against central
//! differences on a handful of parameter entries.
//!
//! cargo run --example gradcheck

use clickprompt::ctr::CtrConfig;
use clickprompt::data::{IdFeatures, TextFeatures, NUM_RESERVED};
use clickprompt::numeric::{Graph, ParamStore};
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{Architecture, Model, Parts};

fn loss(model: &Model, store: &ParamStore, ids: &[IdFeatures], text: &[TextFeatures], y: &[f64]) -> (Graph, clickprompt::numeric::Var) {
    let mut m = model.clone();
    m.store = store.clone();
    let mut g = Graph::new();
    let z = m.fused_logits(&mut g, ids, text).unwrap();
    let p = g.sigmoid(z).unwrap();
    let l = g.bce_loss(p, y).unwrap();
    (g, l)
}

fn main() {
    let arch = Architecture {
        ctr: CtrConfig {
            embed_dim: 4,
            layers: 2,
            hidden: 8,
            ..CtrConfig::default()
        },
        encoder: EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ff: 16,
            z_max: 8,
            k: 3,
            ..EncoderConfig::default()
        },
        layerwise: true,
        cardinalities: vec![5, 7],
        vocab_size: 20,
    };
    let model = Model::new(&arch, Parts::Fused, 0, "init/ctr").unwrap();
    let ids: Vec<IdFeatures> = (0..3).map(|i| IdFeatures { indices: vec![i, 6 - i] }).collect();
    let text: Vec<TextFeatures> = (0..3)
        .map(|i| TextFeatures {
            ids: (0..8).map(|p| if p < 5 + i { NUM_RESERVED + (p * 3 + i) % 15 } else { 0 }).collect(),
            mask: (0..8).map(|p| p < 5 + i).collect(),
            len: 5 + i,
        })
        .collect();
    let y = [1.0, 0.0, 1.0];

    let (g, l) = loss(&model, &model.store, &ids, &text, &y);
    let grads = g.backward(l).unwrap();
    let mut analytic = model.store.clone();
    analytic.zero_grad();
    analytic.accumulate(&g, &grads);

    let h = 1e-5;
    println!("{:<28} {:>14} {:>14} {:>10}", "parameter[0]", "analytic", "numeric", "rel err");
    for id in model.store.ids_by_name() {
        let a = analytic.get(id).grad.as_ref().map_or(0.0, |t| t.data()[0]);
        let eval = |d: f64| {
            let mut s = model.store.clone();
            s.value_mut(id).data_mut()[0] += d;
            let (g, l) = loss(&model, &s, &ids, &text, &y);
            g.value(l).data()[0]
        };
        let n = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        println!("{:<28} {a:>14.6e} {n:>14.6e} {rel:>10.2e}", model.store.name(id));
    }
}
