//! Scratch probe: cosine-similarity and ΔL distributions on the desk corpus
//! under a fine-tuned model, to ground the τ/ε filter defaults.

use lethe_core::corpus::{self, generate_corpus, generate_near_dup_family, Sample, Split};
use lethe_core::engine::{finetune, TrainConfig};
use lethe_core::filter::{delta_loss, embed};
use lethe_core::model::{ModelConfig, ToyLm};
use lethe_core::tokenizer::MIN_VOCAB;
use std::io::Write;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stats(label: &str, xs: &[f64]) {
    if xs.is_empty() {
        println!("{label}: (none)");
        return;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    println!(
        "{label}: n={} min={:.4} p25={:.4} med={:.4} p75={:.4} max={:.4} mean={:.4}",
        s.len(),
        s[0],
        s[s.len() / 4],
        s[s.len() / 2],
        s[3 * s.len() / 4],
        s[s.len() - 1],
        mean
    );
    std::io::stdout().flush().unwrap();
}

fn main() {
    let model_cfg = ModelConfig {
        vocab: MIN_VOCAB,
        d_model: 24,
        n_heads: 2,
        n_blocks: 3,
        d_ff: 48,
        max_seq_len: 160,
    };
    let train = TrainConfig {
        lr: 3e-3,
        batch: 6,
        epoch_cap: 300,
        target_acc: 0.9,
        min_acc: 0.5,
        shuffle_seed: 14,
    };
    let corpus = generate_corpus(11, 6, 0.5).unwrap();
    let mut model = ToyLm::init(model_cfg, 13).unwrap();
    let log = finetune(&mut model, &corpus, &train).unwrap();
    println!("finetuned in {} epochs", log.len() - 1);

    // chunk embeddings for every sample
    let chunks: Vec<(usize, corpus::Chunk, Vec<f64>)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            corpus::chunk(s, 64)
                .unwrap()
                .into_iter()
                .map(move |c| (i, c))
        })
        .map(|(i, c)| {
            let e = embed(&model, &c).unwrap();
            (i, c, e)
        })
        .collect();
    println!("{} chunks", chunks.len());

    let rel = |a: &Sample, b: &Sample| -> &'static str {
        if a.stress.starts_with("duplicate:") && a.stress.ends_with(&b.id) {
            "dup-partner"
        } else if a.stress.starts_with("shared-name:") && a.stress.ends_with(&b.id) {
            "shared-name"
        } else if a.category == b.category {
            "same-category"
        } else {
            "cross-category"
        }
    };
    let mut groups: std::collections::BTreeMap<&'static str, Vec<f64>> = Default::default();
    for (ai, _, ea) in &chunks {
        for (bi, _, eb) in &chunks {
            if ai >= bi {
                continue;
            }
            let (a, b) = (&corpus[*ai], &corpus[*bi]);
            let r = if ai == bi { "self" } else { rel(a, b) };
            groups.entry(r).or_default().push(cos(ea, eb));
        }
    }
    for (label, xs) in &groups {
        stats(label, xs);
        for tau in [0.85, 0.9, 0.95, 0.98] {
            let frac = xs.iter().filter(|&&x| x >= tau).count() as f64 / xs.len() as f64;
            print!("  ≥{tau}: {frac:.3}");
        }
        println!();
    }

    // near-dup family: pairwise cosines of corresponding chunks
    let fam = generate_near_dup_family(77, 6).unwrap();
    let fam_chunks: Vec<Vec<Vec<f64>>> = fam
        .iter()
        .map(|s| {
            corpus::chunk(s, 64)
                .unwrap()
                .iter()
                .map(|c| embed(&model, c).unwrap())
                .collect()
        })
        .collect();
    let mut fam_cos = Vec::new();
    for i in 0..fam.len() {
        for j in 0..i {
            let n = fam_chunks[i].len().min(fam_chunks[j].len());
            for k in 0..n {
                fam_cos.push(cos(&fam_chunks[i][k], &fam_chunks[j][k]));
            }
        }
    }
    stats("near-dup-family", &fam_cos);
    for tau in [0.85, 0.9, 0.95, 0.98] {
        let frac = fam_cos.iter().filter(|&&x| x >= tau).count() as f64 / fam_cos.len() as f64;
        print!("  ≥{tau}: {frac:.3}");
    }
    println!();

    // ΔL distributions
    let forget: Vec<&Sample> = corpus.iter().filter(|s| s.split == Split::Forget).collect();
    let mut single = Vec::new();
    for s in &forget {
        let req = corpus::chunk(s, 64).unwrap();
        for i in 0..req.len() {
            let d = delta_loss(&model, &req, i).unwrap();
            if d.is_finite() {
                single.push(d);
            }
        }
    }
    stats("dL-single-sample-request", &single);

    let mut multi = Vec::new();
    for w in forget.chunks(3) {
        if w.len() < 2 {
            continue;
        }
        let mut req = Vec::new();
        for s in w {
            req.extend(corpus::chunk(s, 64).unwrap());
        }
        for i in 0..req.len() {
            let d = delta_loss(&model, &req, i).unwrap();
            if d.is_finite() {
                multi.push(d);
            }
        }
    }
    stats("dL-three-sample-request", &multi);
}
