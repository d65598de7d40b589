//! Scratch probe: per-pass cost of forward / forward+backward / train step.
use lethe_core::model::{GradMode, ModelConfig, ToyLm};
use lethe_core::tensor::Tape;
use lethe_core::tokenizer::{render_qa, Seq};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig {
        vocab: lethe_core::tokenizer::MIN_VOCAB,
        d_model: 16,
        n_heads: 2,
        n_blocks: 2,
        d_ff: 32,
        max_seq_len: 160,
    };
    let m = ToyLm::init(cfg, 1).unwrap();
    let r = render_qa("where does grady whitlock live these days?", "lakeshore heights");
    let seq = Seq::lm(r.tokens);
    println!("seq len {}", seq.tokens.len());

    let t = Instant::now();
    let n = 200;
    for _ in 0..n {
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::None);
        let _ = m.build_mean_ce(&mut tape, &pv, std::slice::from_ref(&seq)).unwrap();
    }
    println!("forward (GradMode::None): {:.2} ms/pass", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::All);
        let loss = m.build_mean_ce(&mut tape, &pv, std::slice::from_ref(&seq)).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    println!("forward+backward (All): {:.2} ms/pass", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    // head matmul alone: [63,16]·[16,261]
    {
        use lethe_core::tensor::Tensor;
        let h = Tensor::from_vec(&[63, 16], (0..63 * 16).map(|i| (i as f64 * 0.1).sin()).collect::<Vec<_>>()).unwrap();
        let w = Tensor::from_vec(&[16, 261], (0..16 * 261).map(|i| (i as f64 * 0.07).cos()).collect::<Vec<_>>()).unwrap();
        let t = Instant::now();
        let n = 2000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let a = tape.leaf(h.clone(), true);
            let b = tape.leaf(w.clone(), true);
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sum(c).unwrap();
            let _ = tape.backward(s).unwrap();
        }
        println!("head-matmul fwd+bwd on tape: {:.3} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
        let t = Instant::now();
        for _ in 0..n {
            let mut tape = Tape::new();
            let a = tape.leaf(h.clone(), true);
            let b = tape.leaf(w.clone(), true);
            let _ = tape.matmul(a, b).unwrap();
        }
        println!("head-matmul fwd only on tape: {:.3} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
    }
    // register cost
    {
        let t = Instant::now();
        let n = 2000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let _ = m.register(&mut tape, GradMode::All);
        }
        println!("register(All): {:.3} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
    }

    let batch: Vec<Seq> = (0..6).map(|_| seq.clone()).collect();
    let t = Instant::now();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let pv = m.register(&mut tape, GradMode::All);
        let loss = m.build_mean_ce(&mut tape, &pv, &batch).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    println!("batch-6 fwd+bwd: {:.2} ms/step", t.elapsed().as_secs_f64() * 1e3 / 50.0);
}
