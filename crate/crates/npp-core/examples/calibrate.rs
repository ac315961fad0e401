// Scratch calibration driver (not part of the deliverable test suite).
use npp_core::data::{load_dataset, DataSource};
use npp_core::lora::{attach_adapters, train_adapters, AdapterPlan, LayerSelector};
use npp_core::model::{Activation, DenseModel};
use npp_core::quant::{fake_quantize_model, Granularity, QuantFormat, QuantKind};
use npp_core::sensitivity::rank_and_select;
use npp_core::train::{evaluate, train, Hyper, OptimizerKind};
use npp_core::variability::{perturb_weights, PerturbSpec};
use std::time::Instant;

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn pretrain(seed: u64) -> (DenseModel, npp_core::data::Dataset, f64, f64) {
    let data = load_dataset(&DataSource::SyntheticBlobs {
        classes: 10,
        dim: 784,
        n: envu("CAL_N", 1500),
        seed: seed + 1000,
    })
    .unwrap();
    let mut model = DenseModel::new(&[784, 128, 10], Activation::Relu, seed).unwrap();
    let hyper = Hyper {
        lr: envf("CAL_LR", 0.01),
        epochs: envu("CAL_EPOCHS", 30),
        batch_size: 32,
        seed,
        optimizer: OptimizerKind::SgdMomentum,
        momentum: envf("CAL_MU", 0.9),
    };
    let rep = train(&mut model, &data, &hyper).unwrap();
    let acc = rep.final_accuracy;
    let train_acc = evaluate(&model, &data.train, model.natural_mode()).unwrap();
    (model, data, acc, train_acc)
}

fn recover(model: &DenseModel, data: &npp_core::data::Dataset, rank: usize, seed: u64) -> f64 {
    let plan = AdapterPlan::new(rank, LayerSelector::AllLinear);
    let mut adapted = attach_adapters(model, &plan, seed + 7).unwrap();
    let hyper = Hyper {
        lr: envf("CAL_RLR", 0.01),
        epochs: envu("CAL_REPOCHS", 12),
        batch_size: 32,
        seed: seed + 13,
        optimizer: OptimizerKind::SgdMomentum,
        momentum: 0.9,
    };
    match train_adapters(&mut adapted, data, &hyper) {
        Ok(r) => r.final_accuracy,
        Err(e) => {
            eprintln!("recover failed: {e}");
            f64::NAN
        }
    }
}


fn hidden_stats(model: &DenseModel, data: &npp_core::data::Dataset) {
    // hidden activations of the first layer on the test split, computed directly
    let x = &data.test.inputs;
    let w = &model.layers[0].weight;
    let b = &model.layers[0].bias;
    let (n, d, units) = (x.rows(), x.cols(), w.cols());
    let mut relu = vec![0.0f64; n * units];
    for i in 0..n {
        for j in 0..units {
            let mut s = b.data()[j];
            for k in 0..d {
                s += x.data()[i * d + k] * w.data()[k * units + j];
            }
            relu[i * units + j] = s.max(0.0);
        }
    }
    let max_act = relu.iter().cloned().fold(0.0f64, f64::max);
    let mut m0 = vec![0.0; units];
    let mut m1 = vec![0.0; units];
    let (mut n0, mut n1) = (0.0, 0.0);
    for i in 0..n {
        let row = &relu[i * units..(i + 1) * units];
        match data.test.labels[i] {
            0 => { for (a, v) in m0.iter_mut().zip(row) { *a += v; } n0 += 1.0; }
            1 => { for (a, v) in m1.iter_mut().zip(row) { *a += v; } n1 += 1.0; }
            _ => {}
        }
    }
    let diff: f64 = m0.iter().zip(&m1).map(|(a, v)| (a / n0 - v / n1).abs()).sum::<f64>() / units as f64;
    println!("   hidden: max_act {max_act:.2} step {:.3} pair_mean_unit_diff {diff:.3}", max_act / 7.0);
}

fn main() {
    let t0 = Instant::now();
    let nf4 = QuantFormat::new(QuantKind::Nf4, Granularity::PerTensor, Some(4)).unwrap();
    let int8 = QuantFormat::new(QuantKind::Int8, Granularity::PerTensor, Some(8)).unwrap();
    let seeds = envu("CAL_SEEDS", 3) as u64;
    println!("seed base train | nf4 int8 | q_r1 q_r4 q_r8 | sig s_r4 | sens rand");
    for seed in 0..seeds {
        let (model, data, baseline, train_acc) = pretrain(seed);
        hidden_stats(&model, &data);
        let qmodel = fake_quantize_model(&model, &nf4);
        let q_acc = evaluate(&qmodel, &data.test, qmodel.natural_mode()).unwrap();
        // decomposition: weights only / activations only
        let w_only = QuantFormat::new(QuantKind::Nf4, Granularity::PerTensor, None).unwrap();
        let wmodel = fake_quantize_model(&model, &w_only);
        let w_acc = evaluate(&wmodel, &data.test, wmodel.natural_mode()).unwrap();
        let a_only = QuantFormat::new(QuantKind::Int8, Granularity::PerTensor, Some(4)).unwrap();
        let amodel = fake_quantize_model(&model, &a_only);
        let a_acc = evaluate(&amodel, &data.test, amodel.natural_mode()).unwrap();
        println!("   decomp: w_only {w_acc:.3} act4_only(int8w) {a_acc:.3}");
        let imodel = fake_quantize_model(&model, &int8);
        let i_acc = evaluate(&imodel, &data.test, imodel.natural_mode()).unwrap();
        // ceiling probe: train a fresh full model through the quantized forward
        {
            let mut fresh = DenseModel::new(&[784, 128, 10], Activation::Relu, seed + 500).unwrap();
            for l in &mut fresh.layers {
                l.quant_spec = Some(nf4);
            }
            let h = Hyper { lr: envf("CAL_CLR", 0.02), epochs: envu("CAL_CEPOCHS", 25), batch_size: 32, seed: seed + 501, optimizer: OptimizerKind::SgdMomentum, momentum: 0.9 };
            let rep = train(&mut fresh, &data, &h).unwrap();
            println!("   ceiling(fresh model trained through quant): {:.3}", rep.final_accuracy);
        }
        let q1 = recover(&qmodel, &data, 1, seed);
        let q4 = recover(&qmodel, &data, 4, seed);
        let q8 = recover(&qmodel, &data, 8, seed);
        let pmodel = perturb_weights(&model, &PerturbSpec::multiplicative(0.05, seed + 99)).unwrap();
        let p_acc = evaluate(&pmodel, &data.test, pmodel.natural_mode()).unwrap();
        let p4 = recover(&pmodel, &data, 4, seed);
        // sensitivity vs random at 1/class rank-1 on the perturbed model
        let plan = AdapterPlan::new(1, LayerSelector::AllLinear);
        let adapted = attach_adapters(&pmodel, &plan, seed + 7).unwrap();
        let sel = rank_and_select(&adapted, &data.train, 1).unwrap();
        let idxs: Vec<usize> = sel
            .ranked
            .iter()
            .map(|s| data.train.index_of_id(s.sample_id).unwrap())
            .collect();
        let subset = data.train.subset(&idxs).unwrap();
        let hyper = Hyper {
            lr: envf("CAL_SLR", 0.005),
            epochs: envu("CAL_SEPOCHS", 20),
            batch_size: 10,
            seed: seed + 13,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
        };
        let mut m1 = adapted.clone();
        npp_core::lora::train_adapters_on_split(&mut m1, &subset, &data, &hyper).unwrap();
        let sens_acc = evaluate(&m1, &data.test, m1.natural_mode()).unwrap();
        use rand::seq::SliceRandom;
        let mut rng = npp_core::rng::substream(seed + 5, "cal.rand");
        let mut ridx = Vec::new();
        for c in 0..10 {
            let mut pool: Vec<usize> = (0..data.train.len())
                .filter(|&i| data.train.labels[i] == c)
                .collect();
            pool.shuffle(&mut rng);
            ridx.push(pool[0]);
        }
        let rsubset = data.train.subset(&ridx).unwrap();
        let mut m2 = adapted.clone();
        npp_core::lora::train_adapters_on_split(&mut m2, &rsubset, &data, &hyper).unwrap();
        let rand_acc = evaluate(&m2, &data.test, m2.natural_mode()).unwrap();
        println!(
            "{seed}  {baseline:.3} {train_acc:.3} | {q_acc:.3} {i_acc:.3} | {q1:.3} {q4:.3} {q8:.3} | {p_acc:.3} {p4:.3} | {sens_acc:.3} {rand_acc:.3}"
        );
    }
    println!("elapsed {:?}", t0.elapsed());
}
