//! Super-network sanity training, activation counting and the difficulty
//! split between the synthetic presets.

use pdarts::cell::{init_alphas, CandidateSchema};
use pdarts::data::{synth_dataset, synth_pair, Dataset, SynthPreset};
use pdarts::nn::{apply_grads, Ctx};
use pdarts::optim::{self, OptimizerConfig};
use pdarts::supernet::{activation_count_proxy, SearchNetConfig, SuperNet};
use pdarts::tensor::Tensor;

fn desk(cells: usize, classes: usize) -> SearchNetConfig {
    SearchNetConfig {
        cells,
        channels: 8,
        nodes: 2,
        num_classes: classes,
        input_size: 8,
        input_channels: 3,
    }
}

#[test]
fn loss_falls_over_fifty_steps_on_separable_data() {
    let data = synth_dataset(SynthPreset::EasyFit, 3, 64, 2, 8).unwrap();
    let cfg = desk(2, 2);
    let net = SuperNet::build(cfg, &CandidateSchema::full(cfg.spec())).unwrap();
    let mut params = net.init_params::<f64>(0).unwrap();
    let alphas = init_alphas(&net.schema, 0).unwrap().to_store::<f64>().unwrap();
    let opt = OptimizerConfig::sgd_cosine(0.05, 0.0, 1, 0.0);
    let idx: Vec<usize> = (0..32).collect();
    let (x, labels) = data.batch::<f64>(&idx);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let grads = {
            let mut ctx = Ctx::new(&params, true, true, 0).with_store(&alphas, false);
            let xv = ctx.tape.leaf(&x);
            let logits = net.forward(&mut ctx, xv, 0.0).unwrap();
            let loss = ctx.tape.cross_entropy(logits, &labels).unwrap();
            losses.push(ctx.tape.value(loss)[0]);
            ctx.tape.backward(loss).unwrap();
            ctx.collect_grads(0)
        };
        params.zero_grads();
        apply_grads(&mut params, &grads).unwrap();
        optim::step(&mut params, &opt, 0).unwrap();
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "head {head:.4} tail {tail:.4}");
}

#[test]
fn forward_is_deterministic_given_the_dropout_seed() {
    let cfg = desk(3, 4);
    let net = SuperNet::build(cfg, &CandidateSchema::full(cfg.spec())).unwrap();
    let params = net.init_params::<f64>(5).unwrap();
    let alphas = init_alphas(&net.schema, 5).unwrap().to_store::<f64>().unwrap();
    let data = synth_dataset(SynthPreset::Texture, 1, 8, 4, 8).unwrap();
    let (x, _) = data.batch::<f64>(&(0..8).collect::<Vec<_>>());
    let run = |seed| {
        let mut ctx = Ctx::new(&params, false, true, seed).with_store(&alphas, false);
        let xv = ctx.tape.leaf(&x);
        let y = net.forward(&mut ctx, xv, 0.5).unwrap();
        ctx.tape.to_tensor(y)
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

/// Scalars retained by the same network with every edge applied directly.
fn plain_count(cfg: SearchNetConfig, schema: &CandidateSchema) -> usize {
    let net = SuperNet::build(cfg, schema).unwrap();
    let mut ctx = Ctx::<f32>::dry(true);
    let x = ctx.tape.leaf_from(vec![1, 3, 8, 8], Vec::new(), false).unwrap();
    let stem = net.stem.forward(&mut ctx, x).unwrap();
    let (mut s0, mut s1) = (stem, stem);
    let spec = cfg.spec();
    for cell in &net.cells {
        let mut states = vec![cell.pre0.forward(&mut ctx, s0).unwrap(), cell.pre1.forward(&mut ctx, s1).unwrap()];
        for to in 2..spec.nodes + 2 {
            let parts: Vec<_> = (0..to)
                .map(|from| cell.edges[spec.first_edge(to) + from].ops[0].forward(&mut ctx, states[from]).unwrap())
                .collect();
            let sum = ctx.tape.add_n(&parts).unwrap();
            states.push(sum);
        }
        s0 = s1;
        s1 = ctx.tape.concat(&states[2..]).unwrap();
    }
    let pooled = ctx.tape.global_avg_pool(s1).unwrap();
    net.classifier.forward(&mut ctx, pooled).unwrap();
    ctx.tape.activation_count()
}

#[test]
fn single_candidate_proxy_counts_a_plain_network() {
    for cells in [2, 3, 5] {
        let cfg = desk(cells, 10);
        let schema = CandidateSchema::cyclic(cfg.spec(), 1).unwrap();
        assert_eq!(activation_count_proxy(cfg, 1).unwrap(), plain_count(cfg, &schema), "L={cells}");
    }
}

/// Softmax regression on raw pixels, trained by full-batch gradient descent;
/// returns held-out accuracy.
fn linear_probe(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.image_len();
    let k = train.classes;
    let mut w = vec![0.0f64; k * d];
    let mut b = vec![0.0f64; k];
    let scores = |w: &[f64], b: &[f64], img: &[f32]| -> Vec<f64> {
        (0..k)
            .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(img).map(|(a, &x)| a * x as f64).sum::<f64>())
            .collect()
    };
    let n = train.len() as f64;
    for _ in 0..300 {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..train.len() {
            let img = train.image(i);
            let s = scores(&w, &b, img);
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                let p = (s[c] - m).exp() / z - f64::from(u8::from(c == train.labels[i]));
                gb[c] += p / n;
                for (g, &x) in gw[c * d..(c + 1) * d].iter_mut().zip(img) {
                    *g += p * x as f64 / n;
                }
            }
        }
        for (a, g) in w.iter_mut().zip(&gw) {
            *a -= 0.1 * g;
        }
        for (a, g) in b.iter_mut().zip(&gb) {
            *a -= 0.1 * g;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let s = scores(&w, &b, test.image(i));
            let best = (0..k).max_by(|&p, &q| s[p].total_cmp(&s[q])).unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn presets_separate_linear_from_convolutional_difficulty() {
    let (train, test) = synth_pair(SynthPreset::EasyFit, 1, 256, 256, 4, 8).unwrap();
    let easy = linear_probe(&train, &test);
    let (train, test) = synth_pair(SynthPreset::Texture, 1, 256, 256, 2, 8).unwrap();
    let texture = linear_probe(&train, &test);
    assert!(easy >= 0.95, "easy-fit linear accuracy {easy}");
    assert!(texture <= 0.60, "texture linear accuracy {texture}");
}

#[test]
fn batches_are_nchw() {
    let data = synth_dataset(SynthPreset::EasyFit, 0, 6, 2, 8).unwrap();
    let (x, labels): (Tensor<f32>, _) = data.batch(&[0, 3, 5]);
    assert_eq!(x.shape(), &[3, 3, 8, 8]);
    assert_eq!(labels, vec![data.labels[0], data.labels[3], data.labels[5]]);
    assert_eq!(&x.data()[64..128], &data.image(0)[64..128]);
}
