use narco::encoder::{encode, flp_graph, pretrain, PretrainConfig, TrainingInstance};
use narco::problems::flp::{FlpInstance, FlpProblem, Metric};
use narco::problems::generate::gen_flp;
use narco::problems::Sense;
use narco::solver::{flp_testbed, latent_search, SearchConfig};

const TRAIN_SEED_BASE: u64 = 10_000;

fn training_set() -> (Vec<FlpInstance>, Vec<FlpProblem>) {
    let insts: Vec<FlpInstance> = (0..50)
        .map(|s| gen_flp(20, 3, TRAIN_SEED_BASE + s, Metric::Euclidean, false).unwrap())
        .collect();
    let problems = insts.iter().map(|i| FlpProblem::softmin(i.clone(), 50.0).unwrap()).collect();
    (insts, problems)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[usize]) -> usize {
    let mut s = v.to_vec();
    s.sort_unstable();
    s[s.len() / 2]
}

#[test]
fn pretrained_encoder_start_is_no_slower_than_zeros() {
    let (insts, problems) = training_set();
    let data: Vec<TrainingInstance> = insts
        .iter()
        .zip(&problems)
        .map(|(i, p)| TrainingInstance {
            graph: flp_graph(i).unwrap(),
            problem: p,
        })
        .collect();
    let (params, losses) = pretrain(&data, &PretrainConfig::default()).unwrap();
    let tail = mean(&losses[losses.len() - 10..]);
    println!("pretraining loss {:.6} -> {:.6} (ratio {:.4})", losses[0], tail, tail / losses[0]);
    assert!(tail < losses[0]);

    let held_out = flp_testbed(20, 3, 20, 0).unwrap();
    let (mut zeros, mut encoded) = (Vec::new(), Vec::new());
    for (s, t) in held_out.iter().enumerate() {
        let problem = FlpProblem::softmin(t.inst.clone(), 50.0).unwrap();
        let cfg = SearchConfig {
            seed: s as u64,
            ..SearchConfig::default()
        };
        let y_enc = encode(&flp_graph(&t.inst).unwrap(), &params).unwrap();
        let limit = cfg.steps + 1;
        for (y0, out) in [(&t.y0, &mut zeros), (&y_enc, &mut encoded)] {
            let (_, trace) = latent_search(&problem, y0, &cfg).unwrap();
            out.push(trace.steps_to_gap(Sense::Minimize, t.optimum, 0.02).unwrap_or(limit));
        }
    }
    let as_f64 = |v: &[usize]| v.iter().map(|&s| s as f64).collect::<Vec<_>>();
    let (mz, me) = (mean(&as_f64(&zeros)), mean(&as_f64(&encoded)));
    println!("steps to 2% gap: zeros mean {mz} median {}, encoder mean {me} median {}", median(&zeros), median(&encoded));
    assert!(me <= mz, "encoder {encoded:?} vs zeros {zeros:?}");
}
