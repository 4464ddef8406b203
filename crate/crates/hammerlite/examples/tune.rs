use std::time::Instant;

use hammerlite::corpus::Corpus;
use hammerlite::model::{init_params, ModelConfig, ModelParams};
use hammerlite::retrieval::{build_index, recall_at_k, select_topk};
use hammerlite::synth::{generate, SynthSpec};
use hammerlite::training::{train_alternating, TrainConfig};

fn full_recall(params: &ModelParams<f32>, corpus: &Corpus) -> f64 {
    let index = build_index(params, &corpus.premises, None).unwrap();
    let recalls: Vec<f64> = corpus
        .states
        .iter()
        .map(|s| {
            let gt = corpus.gt_ids(s).into_iter().collect();
            recall_at_k(&select_topk(&s.text, &index, 10, params), &gt, 10)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn diagnose(params: &ModelParams<f32>, corpus: &Corpus) {
    let index = build_index(params, &corpus.premises, None).unwrap();
    let n = corpus.premises.len();
    // recall per gt-set size, and rank histogram of missed gts
    let mut by_count: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); 4]; // (states, hit, total)
    let mut rank_hist = [0usize; 4]; // 11-20, 21-50, 51-128, deeper
    let mut pos_cos = 0.0f64;
    let mut best_neg_cos = 0.0f64;
    for s in &corpus.states {
        let gt: Vec<u32> = corpus.gt_ids(s).into_iter().collect();
        let ranked = select_topk(&s.text, &index, n, params).ranked;
        let bucket = gt.len().min(3);
        by_count[bucket].0 += 1;
        for &g in &gt {
            let rank = ranked.iter().position(|&(id, _)| id == g).unwrap();
            by_count[bucket].2 += 1.0;
            if rank < 10 {
                by_count[bucket].1 += 1.0;
            } else {
                let b = if rank < 20 { 0 } else if rank < 50 { 1 } else if rank < 128 { 2 } else { 3 };
                rank_hist[b] += 1;
            }
            pos_cos += ranked.iter().find(|&&(id, _)| id == g).unwrap().1;
        }
        best_neg_cos += ranked.iter().find(|&&(id, _)| !gt.contains(&id)).unwrap().1;
    }
    let total_gt: f64 = by_count.iter().map(|b| b.2).sum();
    for (c, (states, hit, total)) in by_count.iter().enumerate() {
        if *states > 0 {
            eprintln!("  gt_count {c}: {states} states, gt-recall@10 {:.4}", hit / total);
        }
    }
    eprintln!(
        "  missed-gt ranks: 11-20: {}, 21-50: {}, 51-127: {}, 128+: {}",
        rank_hist[0], rank_hist[1], rank_hist[2], rank_hist[3]
    );
    eprintln!(
        "  mean gt cos {:.4} | mean best-non-gt cos {:.4}",
        pos_cos / total_gt,
        best_neg_cos / corpus.states.len() as f64
    );
}

fn phase_timing(corpus: &Corpus, params: &ModelParams<f32>, cfg: &TrainConfig) {
    use hammerlite::training::{
        build_rerank_batch, build_select_batch, recompute_negatives_for_rerank, rerank_grads,
        select_grads,
    };
    use rand::SeedableRng;
    let ctx = params.config.ctx;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    let t = Instant::now();
    let mined = recompute_negatives_for_rerank(params, corpus, cfg.mined_pool).unwrap();
    eprintln!("refresh: {:.2}s", t.elapsed().as_secs_f64());

    let sbatch = build_select_batch(corpus, cfg, ctx, &mut rng).unwrap();
    let t = Instant::now();
    let _ = select_grads(params, &sbatch, cfg.temperature, cfg.dropout, 1);
    eprintln!("select_grads ({} seqs): {:.2}s", sbatch.states.len() + sbatch.positives.len() + sbatch.negatives.len(), t.elapsed().as_secs_f64());

    let rbatch = build_rerank_batch(corpus, &mined, cfg, ctx, &mut rng).unwrap();
    let avg_len =
        rbatch.pairs.iter().map(|(t, _)| t.len()).sum::<usize>() as f64 / rbatch.pairs.len() as f64;
    let t = Instant::now();
    let _ = rerank_grads(params, &rbatch, cfg.dropout, 2);
    eprintln!(
        "rerank_grads ({} pairs, avg len {:.0}): {:.2}s",
        rbatch.pairs.len(),
        avg_len,
        t.elapsed().as_secs_f64()
    );
}

fn micro() {
    use hammerlite::nn::{Graph, ParamSet, Tensor};
    use rand::Rng as _;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut rand_tensor = |r: usize, c: usize| {
        let data: Vec<f32> = (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Tensor::new(r, c, data)
    };
    let params = ParamSet::<f32>::new();

    // raw matmul kernel throughput at model shapes
    let a = rand_tensor(40, 64);
    let b = rand_tensor(64, 256);
    let reps = 20_000;
    let t = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let mut g = Graph::new(&params);
        let an = g.input(a.clone(), false);
        let bn = g.input(b.clone(), false);
        let cn = g.matmul(an, bn);
        sink += g.value(cn).data()[0];
    }
    let dt = t.elapsed().as_secs_f64();
    let flops = reps as f64 * 2.0 * 40.0 * 64.0 * 256.0;
    eprintln!("matmul [40x64][64x256] fwd: {:.1} GFLOP/s (sink {sink:.3})", flops / dt / 1e9);

    // gelu elementwise rate
    let x = rand_tensor(40, 256);
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(&params);
        let xn = g.input(x.clone(), false);
        let gn = g.gelu(xn);
        sink += g.value(gn).data()[0];
    }
    let dt = t.elapsed().as_secs_f64();
    eprintln!(
        "gelu [40x256] fwd: {:.1} ns/elem (sink {sink:.3})",
        dt / (reps as f64 * 40.0 * 256.0) * 1e9
    );

    // one rerank pair end to end, forward vs backward
    use hammerlite::model::{init_params, ModelConfig};
    use hammerlite::nn::Grads;
    let mp = init_params::<f32>(&ModelConfig::scaled(1, 64, 128), 7).unwrap();
    let tokens = hammerlite::text::encode_pair("goal u17 ab cd add3", "p9 : ef gh mul2", 128);
    eprintln!("pair len {}", tokens.len());
    let reps = 2_000;
    let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let t = Instant::now();
    let mut sinkf = 0.0f32;
    for _ in 0..reps {
        let mut g = Graph::new(&mp.set);
        let logit = mp.rerank_logit_graph(&mut g, &tokens, 0.0, &mut rng2);
        sinkf += g.value(logit).data()[0];
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(&mp.set);
        let logit = mp.rerank_logit_graph(&mut g, &tokens, 0.0, &mut rng2);
        let loss = g.bce_with_logits(logit, Tensor::scalar(1.0));
        let mut grads = Grads::zeros_like(&mp.set);
        g.backward(loss, Tensor::scalar(1.0), &mut grads);
        sinkf += grads.tensor(hammerlite::nn::ParamId(0)).data()[0];
    }
    let both = t.elapsed().as_secs_f64() / reps as f64;
    eprintln!(
        "rerank pair: fwd {:.0} us, fwd+bwd {:.0} us (sink {sinkf:.3})",
        fwd * 1e6,
        both * 1e6
    );
}

fn main() {
    if std::env::var("MICRO").is_ok() {
        micro();
        return;
    }
    env_logger::Builder::from_default_env()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp_millis()
        .init();
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let layers: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = SynthSpec { premises: 256, states: 512, overlap: 0.6, seed: 11, ..SynthSpec::default() };
    let (corpus, _) = generate(&spec).unwrap();
    let heads: usize = std::env::var("HEADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let mut params =
        init_params::<f32>(&ModelConfig::with_heads(layers, 64, heads, 128), 7).unwrap();
    let pretrain: usize =
        std::env::var("PRETRAIN").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    if pretrain > 0 {
        use hammerlite::training::pretrain_lm;
        let texts: Vec<String> = corpus
            .premises
            .iter()
            .map(|p| p.statement.clone())
            .chain(corpus.states.iter().map(|s| s.text.clone()))
            .collect();
        let t = Instant::now();
        let (p2, losses) = pretrain_lm(params, &texts, pretrain, 3).unwrap();
        params = p2;
        eprintln!(
            "pretrain {} steps: {:.1}s, loss {:.3} -> {:.3}",
            pretrain,
            t.elapsed().as_secs_f64(),
            losses.first().unwrap(),
            losses.last().unwrap()
        );
    }
    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let envu = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let base = TrainConfig::desk();
    let cfg = TrainConfig {
        lr: envf("LR", base.lr),
        warmup: envu("WARMUP", base.warmup),
        dropout: envf("DROPOUT", base.dropout),
        select_batch: envu("BATCH", base.select_batch),
        extra_negatives: envu("EXTRA", base.extra_negatives),
        temperature: envf("TAU", base.temperature),
        ..base
    };
    eprintln!("cfg: {cfg:?}");
    eprintln!("model: {:?}", params.config);
    phase_timing(&corpus, &params, &cfg);

    let t0 = Instant::now();
    let (trained, metrics) = train_alternating(params, &corpus, &cfg, steps, 1).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let recall = full_recall(&trained, &corpus);
    eprintln!(
        "steps run {} | train {:.1}s ({:.2}s/step) | full recall@10 {:.4} (recall pass {:.1}s)",
        metrics.len(),
        train_secs,
        train_secs / metrics.len().max(1) as f64,
        recall,
        t1.elapsed().as_secs_f64()
    );
    diagnose(&trained, &corpus);
    for m in metrics.iter().filter(|m| m.probe_recall_at_10.is_some()) {
        eprintln!(
            "  step {:>4} probe {:.4} select_loss {:.4} rerank_loss {:.4}",
            m.step,
            m.probe_recall_at_10.unwrap(),
            m.select_loss,
            m.rerank_loss
        );
    }
}
